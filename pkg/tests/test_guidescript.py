import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st

from contactdiff import data as D
from contactdiff import dynmodel as M
from contactdiff import envs as E
from contactdiff import guidance as G
from contactdiff import guidescript as GS

from conftest import fd_grad, random_traj, rel_err

# source -> canonical printed form
GOLDEN_OK = [
    ("a: 1", "a: 1.0\n"),
    ("goal (post) @ 2.5: mean_t(norm2(obs[t, 3] - goal[0]))",
     "goal (post) @ 2.5: mean_t(norm2(obs[t, 3] - goal[0]))\n"),
    ("x: 1 - 2 - 3", "x: 1.0 - 2.0 - 3.0\n"),
    ("x: 1 - (2 - 3)", "x: 1.0 - (2.0 - 3.0)\n"),
    ("x: 2 * (3 + 4) / 5", "x: 2.0 * (3.0 + 4.0) / 5.0\n"),
    ("x: -obs[0, 1] * --2", "x: -obs[0, 1] * -(-2.0)\n"),
    ("x: -(1 + 2)", "x: -(1.0 + 2.0)\n"),
    ("x: sum_t(norm2(nobs[t+1, 0:3] - dyn(t)))", "x: sum_t(norm2(nobs[t+1, 0:3] - dyn(t)))\n"),
    ("a: 1; b (pre): obs[-1, 0]\n\n# comment\nc: clamp(act[0, 0], -1, 1e-3)",
     "a: 1.0\nb (pre): obs[-1, 0]\nc: clamp(act[0, 0], -1.0, 0.001)\n"),
    ("x: mean_t(mask(obs[t, 0:2], heaviside(obs[t, 2] - 0.5)))",
     "x: mean_t(mask(obs[t, 0:2], heaviside(obs[t, 2] - 0.5)))\n"),
    ("x: interp(obs[0, 3], goal[0], t / H)", "x: interp(obs[0, 3], goal[0], t / H)\n"),
    ("x: mean(abs(obs[t-2, 0:4]))", "x: mean(abs(obs[t-2, 0:4]))\n"),
    ("x: norm2(\n  obs[0, 1]\n)", "x: norm2(obs[0, 1])\n"),
]

# source -> (error class, line, column, message fragment); checked for obs 5, act 2, goal 1
GOLDEN_ERR = [
    ("", GS.ParseError, 1, 1, "no statements"),
    ("x 1", GS.ParseError, 1, 3, "expected one of: ':'"),
    ("x: 1 +", GS.ParseError, 1, 7, "unexpected end of input"),
    ("x: obs[t, ]", GS.ParseError, 1, 11, "unexpected ']'"),
    ("x (during): 1", GS.ParseError, 1, 4, "'both', 'post', 'pre'"),
    ("x: foo(1)", GS.ParseError, 1, 4, "unknown name 'foo'"),
    ("x: 1 $ 2", GS.LexError, 1, 6, "unexpected character '$'"),
    ("x: 1\nx: 2", GS.SemanticError, 2, 1, "duplicate term name 'x'"),
    ("x: norm2(1, 2)", GS.DslTypeError, 1, 4, "norm2 takes 1 argument(s), got 2"),
    ("x: (1 + 2", GS.ParseError, 1, 10, "expected one of: ')'"),
    ("x @ w: 1", GS.ParseError, 1, 5, "expected one of: number"),
    ("x: obs[t+a, 0]", GS.ParseError, 1, 10, "expected one of: integer"),
    ("x: goal[1.5]", GS.ParseError, 1, 9, "unexpected '1.5'"),
    ("x: 1 2", GS.ParseError, 1, 6, "unexpected '2'"),
    ("x: obs[t, 0]", GS.DslTypeError, 1, 4, "outside mean_t/sum_t"),
    ("x: obs[0, 9]", GS.SemanticError, 1, 4, "obs index 9 out of range (dimension 5)"),
    ("x: goal[3]", GS.SemanticError, 1, 4, "goal index 3 out of range"),
    ("x: obs[0, 0:2]", GS.DslTypeError, 1, 4, "2-vector, not a scalar"),
    ("x: mean_t(sum_t(obs[t,0]))", GS.DslTypeError, 1, 11, "cannot be nested"),
    ("x: dyn(1)", GS.DslTypeError, 1, 4, "dyn takes the time variable t"),
    ("x: obs[0,0:2] + obs[0,0:3]", GS.DslTypeError, 1, 15, "widths 2 and 3 do not match"),
    ("x @ -1: 1", GS.ParseError, 1, 5, "expected one of: number"),
    ("x: mean_t(obs[t, 2:1])", GS.SemanticError, 1, 11, "range 2:1 out of range"),
]


def check_source(src: str):
    return GS.check(GS.parse(src), 5, 2, 1)


@pytest.mark.parametrize("src,printed", GOLDEN_OK)
def test_parser_golden_ok(src, printed):
    prog = GS.parse(src)
    assert GS.to_source(prog) == printed
    assert GS.parse(printed) == prog


@pytest.mark.parametrize("src,cls,line,col,fragment", GOLDEN_ERR)
def test_parser_golden_errors(src, cls, line, col, fragment):
    with pytest.raises(cls) as info:
        check_source(src)
    assert (info.value.line, info.value.col) == (line, col)
    assert fragment in info.value.describe()


# random well-typed scalar expressions over a door-shaped context
_leaf = st.sampled_from(["1.5", "2", "obs[0, 1]", "obs[-1, 3]", "act[0, 0]", "goal[0]", "H"])


def _combine(children):
    binop = st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(
        lambda t: f"({t[0]} {t[1]} {t[2]})")
    unary = children.map(lambda c: f"-{c}")
    calls = st.tuples(st.sampled_from(["norm2", "abs", "softplus", "wrap"]), children).map(
        lambda t: f"{t[0]}({t[1]})")
    return st.one_of(binop, unary, calls)


expressions = st.recursive(_leaf, _combine, max_leaves=8)


@given(expressions)
def test_print_parse_round_trip(expr):
    prog = check_source(f"x: {expr}")
    again = GS.parse(GS.to_source(prog))
    assert again == prog
    assert GS.to_source(again) == GS.to_source(prog)


@given(expressions, st.integers(0, 1000))
def test_evaluator_gradient_matches_finite_differences(expr, seed):
    spec = E.get_env("door1d")
    prog = check_source(f"x: {expr} + mean_t(norm2(obs[t, 0] - obs[t, 4]))")
    ctx = GS.EvalContext.for_env(spec, [1.0])
    t = random_traj(spec, np.random.default_rng(seed), 6)
    g = GS.eval_grad(prog, t, ctx)
    num = fd_grad(lambda x: GS.evaluate(prog, x, ctx), t.copy())
    assert rel_err(g, num) < 1e-5 or np.linalg.norm(g - num) < 1e-7


def test_time_offsets_and_heaviside_convention():
    spec = E.get_env("hammer1d")
    ctx = GS.EvalContext.for_env(spec, [0.04])
    t = np.zeros((4, 4))
    t[:, 1] = [1.0, 2.0, 4.0, 8.0]
    # obs[t+1] - obs[t] is only defined for t < H - 1
    prog = GS.parse("d: sum_t(obs[t+1, 0] - obs[t, 0])")
    assert GS.evaluate(prog, t, ctx) == 7.0
    zero = GS.parse("h: heaviside(obs[0, 0])")
    assert GS.evaluate(zero, np.zeros((4, 4)), ctx) == 0.0


def test_weights_and_phases_flow_into_terms():
    spec = E.get_env("door1d")
    prog = GS.parse("a (pre) @ 3: mean_t(norm2(obs[t, 0] - obs[t, 4]))\nb (post): norm2(obs[-1, 3] - goal[0])")
    terms = GS.program_terms(prog, GS.EvalContext.for_env(spec, [1.0]))
    assert [(t.name, t.phase, t.weight) for t in terms] == [("a", "pre", 3.0), ("b", "post", 1.0)]
    t = random_traj(spec, np.random.default_rng(0), 6)
    ref = G.align_energy(spec, t)
    assert np.isclose(terms[0].evaluate(t), ref[0])


@pytest.fixture(scope="module")
def fitted():
    out = {}
    for env_id in sorted(E.ENVS):
        spec = E.get_env(env_id)
        demos = D.collect_demos(spec, 4, seed=0)
        norm = D.fit_normalizer(demos)
        dyn = M.train_dynamics(demos, M.DynTrainConfig(steps=100, hidden=(16,)), normalizer=norm)
        out[env_id] = (spec, norm, dyn)
    return out


@pytest.mark.parametrize("env_id", sorted(E.ENVS))
def test_dsl_builtins_match_library_energies(fitted, env_id):
    spec, norm, dyn = fitted[env_id]
    goal = [0.04] if env_id == "hammer1d" else [-2.5]
    if env_id == "door1d":
        goal = [1.0]
    ctx = GS.EvalContext.for_env(spec, goal, norm, dyn)
    checks = [("goal", True, lambda t: G.goal_energy(spec, t, goal, True)),
              ("goal", False, lambda t: G.goal_energy(spec, t, goal, False)),
              ("activity", True, lambda t: G.finger_activity_energy(spec, t, 0.01))]
    if spec.contact_pair is not None:
        checks.append(("align", True, lambda t: G.align_energy(spec, t)))
    for seed in range(3):
        t = GS.client.probe_trajectory(spec, 16, seed)
        for name, soft, fn in checks:
            prog = GS.builtin_program(name, spec, soft=soft)
            e, g = fn(t)
            assert abs(GS.evaluate(prog, t, ctx) - e) <= 1e-9 * max(1.0, abs(e))
            assert np.max(np.abs(GS.eval_grad(prog, t, ctx) - g)) <= 1e-6
        prog = GS.builtin_program("dyn", spec)
        tn = norm.normalize(t)
        assert abs(GS.evaluate(prog, t, ctx) - M.dyn_energy(dyn, tn)) <= 1e-9 * max(1.0, M.dyn_energy(dyn, tn))
        # the DSL works in env units; chain-rule to compare with the normalised gradient
        g_env = GS.eval_grad(prog, t, ctx) * norm.row_scale
        assert np.max(np.abs(g_env - M.dyn_energy_grad(dyn, tn))) <= 1e-6


def test_prompt_has_six_parts_and_is_deterministic():
    a = GS.render_prompt("disk", "turn the disk to -90 degrees")
    b = GS.render_prompt("disk", "turn the disk to -90 degrees")
    assert a.text == b.text
    assert len(GS.PART_NAMES) == 6
    for name in GS.PART_NAMES:
        assert a.part(name).strip()
    assert "turn the disk to -90 degrees" in a.text
    with pytest.raises(ValueError):
        GS.render_prompt("disk", "  ")


GOOD = "```\nalign (pre): mean_t(norm2(obs[t, 0] - obs[t, 4]))\ngoal (post): norm2(obs[-1, 3] - goal[0])\n```"


def test_repair_loop_converges_on_second_round():
    bundle = GS.render_prompt("door1d", "open the door to 30 degrees")
    client = GS.FixtureClient(["align: mean_t(norm2(obs[t, 0] - obs[t, 9]))", GOOD])
    res = GS.generate_guidance(bundle, client, max_rounds=3, goal=[0.5])
    assert res.rounds == 2 and client.calls == 2
    assert res.program.names == ["align", "goal"]
    assert "out of range" in res.diagnostics[0]
    # the diagnostic is fed back to the model
    assert res.diagnostics[0] in res.messages[3]["content"]


def test_repair_loop_exhaustion_and_transport():
    bundle = GS.render_prompt("door1d", "open the door")
    with pytest.raises(GS.ExhaustionError):
        GS.generate_guidance(bundle, GS.FixtureClient(["nonsense"] * 3), max_rounds=2)
    with pytest.raises(GS.TransportError):
        GS.generate_guidance(bundle, GS.FixtureClient(["nonsense"]), max_rounds=2)


def test_fixture_file_split(tmp_path):
    path = tmp_path / "fx.txt"
    path.write_text("first\n---\nsecond\nline\n---  \n")
    assert GS.FixtureClient.from_file(path).responses == ["first", "second\nline"]
    assert GS.extract_program_text("text\n```gs\nx: 1\n```") == "x: 1\n"


class _Chat(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.seen.append((body, self.headers.get("Authorization")))
        if self.server.fail:
            self.send_response(500)
            self.end_headers()
            return
        out = json.dumps({"choices": [{"message": {"content": GOOD}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    srv = HTTPServer(("127.0.0.1", 0), _Chat)
    srv.seen, srv.fail = [], False
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield srv
    srv.shutdown()


def test_http_client_round_trip_and_errors(chat_server):
    url = f"http://127.0.0.1:{chat_server.server_port}/v1/chat"
    client = GS.HttpClient(url, "m", api_key="secret", timeout=5)
    res = GS.generate_guidance(GS.render_prompt("door1d", "open"), client, goal=[0.5])
    assert res.rounds == 1
    body, auth = chat_server.seen[0]
    assert body["model"] == "m" and auth == "Bearer secret"
    chat_server.fail = True
    with pytest.raises(GS.TransportError):
        client.complete([{"role": "user", "content": "x"}])


def test_http_client_from_env(monkeypatch):
    monkeypatch.delenv(GS.client.ENV_URL, raising=False)
    with pytest.raises(ValueError):
        GS.HttpClient.from_env()
    monkeypatch.setenv(GS.client.ENV_URL, "http://localhost:1/x")
    monkeypatch.setenv(GS.client.ENV_KEY, "k")
    c = GS.HttpClient.from_env()
    assert (c.url, c.api_key) == ("http://localhost:1/x", "k")
