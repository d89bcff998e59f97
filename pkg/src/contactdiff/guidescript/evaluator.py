"""Evaluation of guidance programs with reverse-mode gradients.

Every expression evaluates to an array of shape ``(n, w)``: ``n`` time
samples (1 outside ``mean_t``/``sum_t``) by vector width ``w``. Inside a
time reduction ``t`` ranges over every step for which all ``t + k``
references in the reduced expression stay inside the horizon.

``heaviside`` and the condition of ``mask`` carry no gradient.
``heaviside(0)`` is 0. ``norm2`` is the squared Euclidean norm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..envs import wrap_angle
from . import syntax as S


class EvalError(S.GuideScriptError):
    kind = "evaluation error"


@dataclass
class EvalContext:
    obs_dim: int
    act_dim: int
    goal: np.ndarray
    normalizer: object = None
    dyn_model: object = None

    @classmethod
    def for_env(cls, spec, goal, normalizer=None, dyn_model=None) -> "EvalContext":
        return cls(spec.obs_dim, spec.act_dim, spec.goal_vector(goal), normalizer, dyn_model)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _offsets(node, out: list):
    if isinstance(node, S.Access) and node.time.relative:
        out.append(node.time.offset)
    elif isinstance(node, S.Call) and node.func == "dyn":
        out.append(0)
    for child in _children(node):
        _offsets(child, out)
    return out


def _children(node):
    if isinstance(node, S.Neg):
        return (node.operand,)
    if isinstance(node, S.BinOp):
        return (node.left, node.right)
    if isinstance(node, S.Call):
        return node.args
    return ()


class _Eval:
    """Evaluates one trajectory; ``grad`` accumulates d(output)/d(traj)."""

    def __init__(self, traj: np.ndarray, ctx: EvalContext):
        self.traj = traj
        self.ctx = ctx
        self.h = traj.shape[0]
        self.grad = np.zeros_like(traj)
        self.times = None   # time samples of the current reduction

    def fail(self, node, msg):
        raise EvalError(msg, getattr(node, "line", 0), getattr(node, "col", 0))

    # each visit returns (value, backward) where backward(upstream) accumulates
    def visit(self, node):
        return getattr(self, "v_" + type(node).__name__)(node)

    def v_Num(self, node):
        return np.full((1, 1), node.value), lambda up: None

    def v_Horizon(self, node):
        return np.full((1, 1), float(self.h)), lambda up: None

    def v_TimeVar(self, node):
        return self.times[:, None].astype(np.float64), lambda up: None

    def v_GoalRef(self, node):
        return np.full((1, 1), float(self.ctx.goal[node.index])), lambda up: None

    def _rows(self, node):
        tm = node.time
        if tm.relative:
            return self.times + tm.offset
        k = tm.offset if tm.offset >= 0 else self.h + tm.offset
        if not 0 <= k < self.h:
            self.fail(node, f"time index {tm.offset} outside horizon {self.h}")
        return np.array([k])

    def v_Access(self, node):
        rows = self._rows(node)
        ad = self.ctx.act_dim
        base = 0 if node.source == "act" else ad
        cols = np.arange(node.start, node.stop) + base
        val = self.traj[np.ix_(rows, cols)]
        scale = None
        if node.source == "nobs":
            norm = self.ctx.normalizer
            if norm is None:
                self.fail(node, "nobs needs a normaliser")
            off = norm.obs_offset[node.start:node.stop]
            scale = norm.obs_scale[node.start:node.stop]
            val = (val - off) / scale

        def back(up):
            g = np.broadcast_to(up, val.shape)
            if scale is not None:
                g = g / scale
            np.add.at(self.grad, np.ix_(rows, cols), g)
        return val, back

    def v_Neg(self, node):
        v, b = self.visit(node.operand)
        return -v, lambda up: b(-up)

    def v_BinOp(self, node):
        a, ba = self.visit(node.left)
        c, bc = self.visit(node.right)
        op = node.op
        if op == "+":
            out = a + c
            return out, lambda up: (ba(_unbroadcast(up, a.shape)), bc(_unbroadcast(up, c.shape)))
        if op == "-":
            out = a - c
            return out, lambda up: (ba(_unbroadcast(up, a.shape)), bc(_unbroadcast(-up, c.shape)))
        if op == "*":
            out = a * c
            return out, lambda up: (ba(_unbroadcast(up * c, a.shape)), bc(_unbroadcast(up * a, c.shape)))
        if np.any(c == 0):
            self.fail(node, "division by zero")
        out = a / c
        return out, lambda up: (ba(_unbroadcast(up / c, a.shape)),
                                bc(_unbroadcast(-up * a / (c * c), c.shape)))

    def v_Call(self, node):
        f = node.func
        if f in S.TIME_REDUCERS:
            return self._reduce_t(node)
        if f == "dyn":
            return self._dyn(node)
        vals = [self.visit(a) for a in node.args]
        x, bx = vals[0]
        if f == "norm2":
            return np.sum(x * x, axis=1, keepdims=True), lambda up: bx(2 * x * up)
        if f == "sum":
            return np.sum(x, axis=1, keepdims=True), lambda up: bx(np.broadcast_to(up, x.shape))
        if f == "mean":
            w = x.shape[1]
            return np.mean(x, axis=1, keepdims=True), lambda up: bx(np.broadcast_to(up / w, x.shape))
        if f == "abs":
            return np.abs(x), lambda up: bx(up * np.sign(x))
        if f == "softplus":
            return dc.softplus(x), lambda up: bx(up * dc.sigmoid(x))
        if f == "heaviside":
            return (x > 0).astype(np.float64), lambda up: None
        if f == "wrap":
            return wrap_angle(x), lambda up: bx(up)
        if f == "clamp":
            (lo, blo), (hi, bhi) = vals[1], vals[2]
            out = np.minimum(np.maximum(x, lo), hi)
            below = x < lo
            above = (x > hi) & ~below

            def back(up):
                up = np.broadcast_to(up, out.shape)
                inside = ~(below | above)
                bx(_unbroadcast(up * np.broadcast_to(inside, out.shape), x.shape))
                blo(_unbroadcast(up * np.broadcast_to(below, out.shape), lo.shape))
                bhi(_unbroadcast(up * np.broadcast_to(above, out.shape), hi.shape))
            return out, back
        if f == "interp":
            (b, bb), (u, bu) = vals[1], vals[2]
            out = (1 - u) * x + u * b
            return out, lambda up: (bx(_unbroadcast(up * (1 - u), x.shape)),
                                    bb(_unbroadcast(up * u, b.shape)),
                                    bu(_unbroadcast(up * (b - x), u.shape)))
        if f == "mask":
            e, be = vals[1]
            on = (x > 0).astype(np.float64)
            out = on * e
            return out, lambda up: be(_unbroadcast(up * on, e.shape))
        self.fail(node, f"unknown function {f!r}")

    def _reduce_t(self, node):
        offs = _offsets(node.args[0], [])
        lo = max(0, -min(offs)) if offs else 0
        hi = self.h - 1 - (max(0, max(offs)) if offs else 0)
        if hi < lo:
            self.fail(node, f"no valid time steps for offsets {sorted(set(offs))} at horizon {self.h}")
        saved = self.times
        self.times = np.arange(lo, hi + 1)
        v, b = self.visit(node.args[0])
        self.times = saved
        n = hi - lo + 1
        v = np.broadcast_to(v, (n, v.shape[1]))
        if node.func == "sum_t":
            return v.sum(axis=0, keepdims=True), lambda up: b(np.broadcast_to(up, (n, up.shape[1])))
        return v.mean(axis=0, keepdims=True), lambda up: b(np.broadcast_to(up / n, (n, up.shape[1])))

    def _dyn(self, node):
        ctx = self.ctx
        if ctx.dyn_model is None or ctx.normalizer is None:
            self.fail(node, "dyn needs a dynamics model and a normaliser")
        rows = self.times
        ad, od = ctx.act_dim, ctx.obs_dim
        norm = ctx.normalizer
        s_n = (self.traj[rows, ad:] - norm.obs_offset) / norm.obs_scale
        a_n = (self.traj[rows, :ad] - norm.act_offset) / norm.act_scale
        x = np.concatenate([s_n, a_n], axis=1)
        params = ctx.dyn_model.params
        out = s_n + dc.mlp_forward(params, x)

        def back(up):
            up = np.broadcast_to(up, out.shape)
            _, gx = dc.mlp_backward(params, x, up)
            np.add.at(self.grad, (rows, slice(ad, None)), (gx[:, :od] + up) / norm.obs_scale)
            np.add.at(self.grad, (rows, slice(0, ad)), gx[:, od:] / norm.act_scale)
        return out, back


def _check_traj(traj, ctx: EvalContext) -> np.ndarray:
    t = np.asarray(traj, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != ctx.obs_dim + ctx.act_dim:
        raise ValueError(f"trajectory must be H x {ctx.obs_dim + ctx.act_dim}")
    return t


def eval_statement(stmt: S.Statement, traj, ctx: EvalContext, with_grad: bool = False):
    t = _check_traj(traj, ctx)
    ev = _Eval(t, ctx)
    v, back = ev.visit(stmt.expr)
    value = float(v.reshape(-1)[0])
    if not with_grad:
        return value
    back(np.ones((1, 1)))
    return value, ev.grad


def term_values(program: S.Program, traj, ctx: EvalContext) -> dict:
    """Unweighted value of every named term."""
    return {s.name: eval_statement(s, traj, ctx) for s in program.statements}


def evaluate(program: S.Program, traj, ctx: EvalContext) -> float:
    """Weighted total energy ``sum_i weight_i * term_i``."""
    return float(sum(s.weight * eval_statement(s, traj, ctx) for s in program.statements))


def eval_grad(program: S.Program, traj, ctx: EvalContext) -> np.ndarray:
    """Gradient of :func:`evaluate` with respect to every trajectory entry."""
    t = _check_traj(traj, ctx)
    g = np.zeros_like(t)
    for s in program.statements:
        g += s.weight * eval_statement(s, t, ctx, with_grad=True)[1]
    return g


def calibrate(program: S.Program, traj, ctx: EvalContext, eps: float = 1e-8) -> S.Program:
    """Rescale weights so each term's value on ``traj`` equals its written weight.

    A term declared ``@ 30`` whose first-batch value is ``v`` ends up with
    weight ``30 / (|v| + eps)``.
    """
    stmts = []
    for s in program.statements:
        v = abs(eval_statement(s, traj, ctx))
        stmts.append(S.Statement(s.name, s.phase, s.weight / (v + eps), s.expr, s.line))
    return S.Program(tuple(stmts))


def program_terms(program: S.Program, ctx: EvalContext, normalizer=None):
    """Guidance terms for the planner (normalised rows in, chain-ruled out)."""
    from ..guidance import EnergyTerm, env_units

    terms = []
    for s in program.statements:
        def fn(traj, s=s):
            return eval_statement(s, traj, ctx, with_grad=True)
        terms.append(EnergyTerm(s.name, s.phase, s.weight, env_units(fn, normalizer)))
    return terms
