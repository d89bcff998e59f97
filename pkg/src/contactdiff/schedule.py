"""Variance-preserving noise schedules, forward noising and the guided
Gaussian posterior step.

Tables are stored with a leading dummy entry so that ``alpha_bar[i]`` is the
value for diffusion step ``i`` (1-based); index 0 holds the clean-data
values (``alpha_bar[0] == 1``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GuidanceDivergence(FloatingPointError):
    """A guidance gradient produced non-finite values."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"guidance term {term!r} produced non-finite values{detail}")


@dataclass(frozen=True)
class NoiseSchedule:
    n_steps: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    # posterior q(x_{i-1} | x_i, x_0): mean = coef_x0[i]*x0 + coef_xt[i]*x_i
    post_var: np.ndarray
    coef_x0: np.ndarray
    coef_xt: np.ndarray

    def check_step(self, i: int) -> None:
        if not 1 <= i <= self.n_steps:
            raise IndexError(f"diffusion step {i} outside 1..{self.n_steps}")


def _cosine_alpha_bar(n: int, s: float = 0.008) -> np.ndarray:
    t = np.arange(n + 1) / n
    f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
    return f / f[0]


def make_schedule(n_steps: int = 20, kind: str = "cosine", max_beta: float = 0.999) -> NoiseSchedule:
    """Build the tables for ``n_steps`` diffusion steps.

    ``kind`` is ``"cosine"`` (default) or ``"linear"``. For the linear schedule
    beta runs from 1e-4 to 0.02 at N=1000 and is rescaled for other N so that
    the terminal alpha_bar stays near zero.
    """
    if n_steps < 2:
        raise ValueError(f"need at least 2 diffusion steps, got {n_steps}")
    if kind == "cosine":
        ab = _cosine_alpha_bar(n_steps)
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, max_beta)
    elif kind == "linear":
        scale = 1000.0 / n_steps
        betas = np.linspace(scale * 1e-4, min(scale * 0.02, max_beta), n_steps)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)

    post_var = np.zeros(n_steps + 1)
    coef_x0 = np.zeros(n_steps + 1)
    coef_xt = np.zeros(n_steps + 1)
    for i in range(1, n_steps + 1):
        ab_prev = alpha_bar[i - 1]
        post_var[i] = betas[i] * (1.0 - ab_prev) / (1.0 - alpha_bar[i])
        coef_x0[i] = betas[i] * np.sqrt(ab_prev) / (1.0 - alpha_bar[i])
        coef_xt[i] = (1.0 - ab_prev) * np.sqrt(alphas[i]) / (1.0 - alpha_bar[i])
    # step 1 has zero posterior variance; reuse step 2's so guidance still acts there
    post_var[1] = post_var[2]
    sched = NoiseSchedule(n_steps, kind, betas, alphas, alpha_bar, post_var, coef_x0, coef_xt)
    if not np.all(np.diff(alpha_bar[1:]) < 0):
        raise ValueError("alpha_bar is not strictly decreasing")
    return sched


def q_sample(sched: NoiseSchedule, x0, i: int, noise) -> np.ndarray:
    """Forward-noise ``x0`` to step ``i`` with the supplied standard-normal noise."""
    sched.check_step(i)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != data shape {x0.shape}")
    ab = sched.alpha_bar[i]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def q_sample_batch(sched: NoiseSchedule, x0: np.ndarray, steps: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Vectorised :func:`q_sample` with one step index per leading row."""
    ab = sched.alpha_bar[steps].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_mean(sched: NoiseSchedule, x0_hat, x_t, i: int) -> np.ndarray:
    sched.check_step(i)
    return sched.coef_x0[i] * np.asarray(x0_hat) + sched.coef_xt[i] * np.asarray(x_t)


def posterior_step(sched: NoiseSchedule, x0_hat, x_t, i: int, scale: float, grad,
                   rng: np.random.Generator | None, term: str = "guidance") -> np.ndarray:
    """Sample ``x_{i-1} ~ N(mu + scale * var_i * grad, var_i)``.

    ``mu`` is the DDPM posterior mean given the clean estimate ``x0_hat``. At
    ``i == 1`` the shifted mean is returned without noise. ``term`` names the
    energy reported if ``grad`` is non-finite.
    """
    sched.check_step(i)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x0_hat.shape != x_t.shape:
        raise ValueError(f"shape mismatch: {x0_hat.shape} vs {x_t.shape}")
    mu = posterior_mean(sched, x0_hat, x_t, i)
    var = sched.post_var[i]
    if grad is not None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != mu.shape:
            raise ValueError(f"guidance shape {grad.shape} != trajectory shape {mu.shape}")
        if not np.all(np.isfinite(grad)):
            raise GuidanceDivergence(term)
        mu = mu + scale * var * grad
    if i == 1:
        return mu
    if rng is None:
        raise ValueError("an rng is required for stochastic steps (i > 1)")
    return mu + np.sqrt(var) * rng.standard_normal(mu.shape)
