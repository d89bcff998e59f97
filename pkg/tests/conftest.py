import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from contactdiff import envs as E

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SESSION_START = time.monotonic()
# criterion number -> (passed, detail), filled by the acceptance tests
ACCEPTANCE = {}


def random_traj(spec: E.EnvSpec, rng: np.random.Generator, horizon: int = 16) -> np.ndarray:
    """In-bounds random ``[action, state]`` rows."""
    acts = rng.uniform(-spec.action_bounds, spec.action_bounds, size=(horizon, spec.act_dim))
    obs = rng.uniform(spec.state_low, spec.state_high, size=(horizon, spec.obs_dim))
    return np.concatenate([acts, obs], axis=1)


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        hi = f(x)
        flat[k] = old - eps
        lo = f(x)
        flat[k] = old
        gf[k] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(config, items):
    # acceptance criteria run last so the wall-clock criterion sees the whole suite
    items.sort(key=lambda it: "test_acceptance" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
