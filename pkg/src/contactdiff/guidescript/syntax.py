"""Lexer, parser, static checks and pretty-printer for guidance programs.

Grammar (EBNF)::

    program    = { statement ( NEWLINE | ";" ) } ;
    statement  = NAME [ "(" phase ")" ] [ "@" NUMBER ] ":" expr ;
    phase      = "pre" | "post" | "both" ;
    expr       = term { ( "+" | "-" ) term } ;
    term       = unary { ( "*" | "/" ) unary } ;
    unary      = "-" unary | primary ;
    primary    = NUMBER | "t" | "H" | "(" expr ")"
               | ( "obs" | "act" | "nobs" ) "[" time "," index "]"
               | "goal" "[" INT "]"
               | NAME "(" [ expr { "," expr } ] ")" ;
    time       = "t" [ ( "+" | "-" ) INT ] | [ "-" ] INT ;
    index      = INT [ ":" INT ] ;

A negative literal time counts from the end (``-1`` is the last step).
Newlines inside brackets are ignored and ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

FUNCTIONS = {
    # name: (min args, max args)
    "mean_t": (1, 1), "sum_t": (1, 1), "norm2": (1, 1), "mean": (1, 1), "sum": (1, 1),
    "abs": (1, 1), "softplus": (1, 1), "heaviside": (1, 1), "wrap": (1, 1),
    "clamp": (3, 3), "interp": (3, 3), "mask": (2, 2), "dyn": (1, 1),
}
TIME_REDUCERS = ("mean_t", "sum_t")
PHASES = ("pre", "post", "both")
KEYWORDS = {"obs", "act", "nobs", "goal", "t", "H"}


class GuideScriptError(Exception):
    """Base error carrying a source position."""

    kind = "error"

    def __init__(self, message: str, line: int = 0, col: int = 0, expected=()):
        self.message = message
        self.line = line
        self.col = col
        self.expected = tuple(sorted(set(expected)))
        super().__init__(self.describe())

    def describe(self) -> str:
        s = f"{self.kind} at line {self.line}, column {self.col}: {self.message}"
        if self.expected:
            s += f" (expected one of: {', '.join(self.expected)})"
        return s


class LexError(GuideScriptError):
    kind = "lexer error"


class ParseError(GuideScriptError):
    kind = "parse error"


class SemanticError(GuideScriptError):
    kind = "semantic error"


class DslTypeError(GuideScriptError):
    kind = "type error"


# -- AST ----------------------------------------------------------------------
# positions are excluded from equality so that re-parsed programs compare equal

@dataclass(frozen=True)
class Num:
    value: float
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class TimeVar:
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Horizon:
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class TimeRef:
    """``t + offset`` when ``relative``, otherwise the literal step ``offset``."""
    relative: bool
    offset: int


@dataclass(frozen=True)
class Access:
    source: str          # obs | act | nobs
    time: TimeRef
    start: int
    stop: int            # exclusive
    ranged: bool         # written as start:stop
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class GoalRef:
    index: int
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Neg:
    operand: object
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Statement:
    name: str
    phase: str
    weight: float
    expr: object
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Program:
    statements: tuple

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.statements]

    def __len__(self):
        return len(self.statements)


# -- lexer --------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str   # NAME NUMBER OP NEWLINE EOF
    text: str
    line: int
    col: int


_OPS = set("()[],:+-*/@;")


def tokenize(source: str) -> list[Token]:
    toks: list[Token] = []
    line, col, i, depth = 1, 1, 0, 0
    n = len(source)
    while i < n:
        ch = source[i]
        if ch == "#":
            while i < n and source[i] != "\n":
                i += 1
            continue
        if ch == "\n":
            if depth == 0:
                toks.append(Token("NEWLINE", "\n", line, col))
            i += 1
            line, col = line + 1, 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and source[j].isdigit():
                j += 1
            if j < n and source[j] == ".":
                j += 1
                while j < n and source[j].isdigit():
                    j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            toks.append(Token("NUMBER", source[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            toks.append(Token("NAME", source[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch in _OPS:
            if ch in "([":
                depth += 1
            elif ch in ")]":
                depth = max(0, depth - 1)
            toks.append(Token("OP", ch, line, col))
            i += 1
            col += 1
            continue
        raise LexError(f"unexpected character {ch!r}", line, col)
    toks.append(Token("EOF", "", line, col))
    return toks


# -- parser -------------------------------------------------------------------

class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.pos]

    def advance(self) -> Token:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def at(self, text: str) -> bool:
        return self.tok.kind in ("OP", "NAME") and self.tok.text == text

    def fail(self, expected, what: str | None = None):
        t = self.tok
        found = "end of input" if t.kind == "EOF" else ("newline" if t.kind == "NEWLINE" else repr(t.text))
        raise ParseError(what or f"unexpected {found}", t.line, t.col, expected)

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail([repr(text)])
        return self.advance()

    def skip_separators(self):
        while self.tok.kind == "NEWLINE" or self.at(";"):
            self.advance()

    def program(self) -> Program:
        stmts = []
        self.skip_separators()
        while self.tok.kind != "EOF":
            stmts.append(self.statement())
            if self.tok.kind == "EOF":
                break
            if not (self.tok.kind == "NEWLINE" or self.at(";")):
                self.fail(["newline", "';'", "'+'", "'-'", "'*'", "'/'"])
            self.skip_separators()
        return Program(tuple(stmts))

    def statement(self) -> Statement:
        t = self.tok
        if t.kind != "NAME":
            self.fail(["term name"])
        self.advance()
        phase, weight = "both", 1.0
        if self.at("("):
            self.advance()
            p = self.tok
            if p.kind != "NAME" or p.text not in PHASES:
                self.fail([repr(x) for x in PHASES])
            phase = self.advance().text
            self.expect(")")
        if self.at("@"):
            self.advance()
            if self.tok.kind != "NUMBER":
                self.fail(["number"])
            weight = float(self.advance().text)
        self.expect(":")
        return Statement(t.text, phase, weight, self.expr(), t.line)

    def expr(self):
        node = self.term()
        while self.at("+") or self.at("-"):
            op = self.advance()
            node = BinOp(op.text, node, self.term(), op.line, op.col)
        return node

    def term(self):
        node = self.unary()
        while self.at("*") or self.at("/"):
            op = self.advance()
            node = BinOp(op.text, node, self.unary(), op.line, op.col)
        return node

    def unary(self):
        if self.at("-"):
            op = self.advance()
            # a minus directly before a literal is part of the literal
            if self.tok.kind == "NUMBER":
                t = self.advance()
                return Num(-float(t.text), op.line, op.col)
            return Neg(self.unary(), op.line, op.col)
        return self.primary()

    _PRIMARY = ["number", "'('", "'-'", "'t'", "'H'", "'obs'", "'act'", "'nobs'", "'goal'", "function name"]

    def primary(self):
        t = self.tok
        if t.kind == "NUMBER":
            self.advance()
            return Num(float(t.text), t.line, t.col)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if t.kind != "NAME":
            self.fail(self._PRIMARY)
        if t.text == "t":
            self.advance()
            return TimeVar(t.line, t.col)
        if t.text == "H":
            self.advance()
            return Horizon(t.line, t.col)
        if t.text in ("obs", "act", "nobs"):
            return self.access()
        if t.text == "goal":
            self.advance()
            self.expect("[")
            k = self.integer()
            self.expect("]")
            return GoalRef(k, t.line, t.col)
        if t.text in FUNCTIONS:
            self.advance()
            self.expect("(")
            args = []
            if not self.at(")"):
                args.append(self.expr())
                while self.at(","):
                    self.advance()
                    args.append(self.expr())
            if not self.at(")"):
                self.fail(["')'", "','"])
            self.advance()
            lo, hi = FUNCTIONS[t.text]
            if not lo <= len(args) <= hi:
                raise DslTypeError(f"{t.text} takes {lo} argument(s), got {len(args)}", t.line, t.col)
            return Call(t.text, tuple(args), t.line, t.col)
        raise ParseError(f"unknown name {t.text!r}", t.line, t.col, self._PRIMARY)

    def integer(self) -> int:
        neg = False
        if self.at("-"):
            self.advance()
            neg = True
        t = self.tok
        if t.kind != "NUMBER" or not t.text.isdigit():
            self.fail(["integer"])
        self.advance()
        return -int(t.text) if neg else int(t.text)

    def access(self) -> Access:
        t = self.advance()
        self.expect("[")
        if self.at("t"):
            self.advance()
            off = 0
            if self.at("+") or self.at("-"):
                sign = -1 if self.advance().text == "-" else 1
                tk = self.tok
                if tk.kind != "NUMBER" or not tk.text.isdigit():
                    self.fail(["integer"])
                off = sign * int(self.advance().text)
            time = TimeRef(True, off)
        elif self.tok.kind == "NUMBER" or self.at("-"):
            time = TimeRef(False, self.integer())
        else:
            self.fail(["'t'", "integer"])
        self.expect(",")
        start = self.integer()
        stop, ranged = start + 1, False
        if self.at(":"):
            self.advance()
            stop, ranged = self.integer(), True
        self.expect("]")
        return Access(t.text, time, start, stop, ranged, t.line, t.col)


def parse(source: str) -> Program:
    """Parse source text into a :class:`Program` (syntax only)."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    prog = _Parser(tokenize(source)).program()
    seen = set()
    for s in prog.statements:
        if s.name in seen:
            raise SemanticError(f"duplicate term name {s.name!r}", s.line, 1)
        seen.add(s.name)
    if not prog.statements:
        raise ParseError("program has no statements", 1, 1, ["term name"])
    return prog


# -- static checks -------------------------------------------------------------

@dataclass(frozen=True)
class Shape:
    """Static type of an expression: vector width and time dependence."""
    width: int
    timed: bool


def _pos(node):
    return getattr(node, "line", 0), getattr(node, "col", 0)


def check(program: Program, obs_dim: int, act_dim: int, goal_dim: int) -> Program:
    """Index-range and type checks. Returns the program unchanged on success."""
    for s in program.statements:
        shp = _infer(s.expr, obs_dim, act_dim, goal_dim, in_time=False)
        line, col = _pos(s.expr)
        if shp.timed:
            raise DslTypeError(f"term {s.name!r} depends on t outside mean_t/sum_t", line, col)
        if shp.width != 1:
            raise DslTypeError(f"term {s.name!r} is a {shp.width}-vector, not a scalar", line, col)
        if s.weight < 0:
            raise SemanticError(f"term {s.name!r} has negative weight", s.line, 1)
    return program


def _join(a: Shape, b: Shape, node) -> Shape:
    if a.width != b.width and 1 not in (a.width, b.width):
        raise DslTypeError(f"vector widths {a.width} and {b.width} do not match", *_pos(node))
    return Shape(max(a.width, b.width), a.timed or b.timed)


def _infer(node, od, ad, gd, in_time: bool) -> Shape:
    if isinstance(node, Num) or isinstance(node, Horizon):
        return Shape(1, False)
    if isinstance(node, TimeVar):
        if not in_time:
            raise DslTypeError("t used outside mean_t/sum_t", *_pos(node))
        return Shape(1, True)
    if isinstance(node, GoalRef):
        if not 0 <= node.index < gd:
            raise SemanticError(f"goal index {node.index} out of range (goal has {gd} entries)", *_pos(node))
        return Shape(1, False)
    if isinstance(node, Access):
        dim = ad if node.source == "act" else od
        if node.time.relative and not in_time:
            raise DslTypeError(f"{node.source}[t...] used outside mean_t/sum_t", *_pos(node))
        if node.start < 0 or node.start >= dim:
            raise SemanticError(f"{node.source} index {node.start} out of range (dimension {dim})", *_pos(node))
        if node.stop > dim or node.stop <= node.start:
            raise SemanticError(f"{node.source} range {node.start}:{node.stop} out of range (dimension {dim})",
                                *_pos(node))
        return Shape(node.stop - node.start, node.time.relative)
    if isinstance(node, Neg):
        return _infer(node.operand, od, ad, gd, in_time)
    if isinstance(node, BinOp):
        return _join(_infer(node.left, od, ad, gd, in_time), _infer(node.right, od, ad, gd, in_time), node)
    if isinstance(node, Call):
        f = node.func
        if f in TIME_REDUCERS:
            if in_time:
                raise DslTypeError(f"{f} cannot be nested inside another time reduction", *_pos(node))
            inner = _infer(node.args[0], od, ad, gd, in_time=True)
            return Shape(inner.width, False)
        if f == "dyn":
            arg = node.args[0]
            if not isinstance(arg, TimeVar):
                raise DslTypeError("dyn takes the time variable t", *_pos(node))
            _infer(arg, od, ad, gd, in_time)
            return Shape(od, True)
        shapes = [_infer(a, od, ad, gd, in_time) for a in node.args]
        if f in ("norm2", "mean", "sum"):
            return Shape(1, shapes[0].timed)
        out = shapes[0]
        for s in shapes[1:]:
            out = _join(out, s, node)
        return out
    raise TypeError(f"unknown node {node!r}")


# -- pretty-printer --------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    return repr(float(v))


def to_source_expr(node, parent_prec: int = 0, right: bool = False) -> str:
    if isinstance(node, Num):
        s = _fmt_num(node.value)
        return f"({s})" if node.value < 0 and parent_prec > 0 else s
    if isinstance(node, TimeVar):
        return "t"
    if isinstance(node, Horizon):
        return "H"
    if isinstance(node, GoalRef):
        return f"goal[{node.index}]"
    if isinstance(node, Access):
        tm = node.time
        if tm.relative:
            ts = "t" if tm.offset == 0 else (f"t+{tm.offset}" if tm.offset > 0 else f"t-{-tm.offset}")
        else:
            ts = str(tm.offset)
        idx = f"{node.start}:{node.stop}" if node.ranged else str(node.start)
        return f"{node.source}[{ts}, {idx}]"
    if isinstance(node, Neg):
        inner = to_source_expr(node.operand, 3)
        if isinstance(node.operand, Num) and not inner.startswith("("):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, BinOp):
        p = _PREC[node.op]
        s = f"{to_source_expr(node.left, p)} {node.op} {to_source_expr(node.right, p, right=True)}"
        # left-associative: a right operand of equal precedence needs brackets
        if p < parent_prec or (p == parent_prec and right):
            return f"({s})"
        return s
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source_expr(a) for a in node.args)})"
    raise TypeError(f"unknown node {node!r}")


def to_source(program: Program) -> str:
    lines = []
    for s in program.statements:
        head = s.name
        if s.phase != "both":
            head += f" ({s.phase})"
        if s.weight != 1.0:
            head += f" @ {repr(float(s.weight))}"
        lines.append(f"{head}: {to_source_expr(s.expr)}")
    return "\n".join(lines) + "\n"
