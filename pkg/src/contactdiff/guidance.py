"""Energy terms and their composition into a guidance gradient.

Trajectories passed to the energy functions are ``H x (act + obs)`` arrays in
environment units with rows laid out as ``[action, state]``. An
:class:`EnergyTerm` wraps such a function for use on normalised trajectories
by mapping through the normaliser and chain-ruling the gradient back.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import envs as E
from .data import Normalizer
from .diffcore import softplus, sigmoid
from .schedule import GuidanceDivergence

PHASES = ("pre", "post", "both")


@dataclass
class GuidanceConfig:
    alpha: float = 1000.0
    delta1: float = 0.1
    delta2: float = 0.15
    delta3: float = 0.01
    gamma: float = 1.0
    weights: dict = field(default_factory=lambda: {
        "goal": 30.0, "align": 12.0, "activity": 12.0, "dyn": 1.2})
    soft_goal: bool = True
    # linear blend of pre/post terms over the band [delta1, 2 * delta1]
    blend: bool = False
    # temperature of the activity surrogate, as a fraction of delta3
    activity_temp: float = 0.25

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("guidance scale must be non-negative")
        if min(self.delta1, self.delta2, self.delta3) <= 0:
            raise ValueError("thresholds must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("term weights must be non-negative")

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 1.0))


@dataclass
class EnergyTerm:
    """One expert of the product: weight * energy, active in one phase.

    ``fn`` maps a trajectory to ``(energy, gradient)``. ``projection`` terms
    carry no gradient and instead rewrite the clean estimate.
    """
    name: str
    phase: str
    weight: float
    fn: Callable | None = None
    projection: Callable | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"term phase must be one of {PHASES}, got {self.phase!r}")
        if self.weight < 0:
            raise ValueError(f"term {self.name!r} has negative weight")

    def evaluate(self, traj) -> float:
        return 0.0 if self.fn is None else float(self.fn(traj)[0])

    def gradient(self, traj) -> np.ndarray:
        if self.fn is None:
            return np.zeros(np.shape(traj))
        return np.asarray(self.fn(traj)[1], dtype=np.float64)

    def active(self, phase: str) -> bool:
        return self.phase == "both" or self.phase == phase


def _time_weights(h: int, gamma: float) -> np.ndarray:
    return gamma ** np.arange(h) / h


def _state_cols(spec: E.EnvSpec, idx) -> list[int]:
    return [spec.act_dim + int(i) for i in idx]


def _check(spec: E.EnvSpec, traj) -> np.ndarray:
    t = np.asarray(traj, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != spec.act_dim + spec.obs_dim:
        raise ValueError(f"{spec.env_id}: trajectory must be H x {spec.act_dim + spec.obs_dim}")
    return t


# -- built-in energies ---------------------------------------------------------

def align_energy(spec: E.EnvSpec, traj, gamma: float = 1.0):
    """Mean squared distance between the hand and the contact point."""
    if spec.contact_pair is None:
        raise ValueError(f"{spec.env_id} has no contact point")
    t = _check(spec, traj)
    h, c = _state_cols(spec, spec.contact_pair)
    w = _time_weights(t.shape[0], gamma)
    d = t[:, h] - t[:, c]
    g = np.zeros_like(t)
    g[:, h] = 2 * w * d
    g[:, c] = -2 * w * d
    return float(np.sum(w * d * d)), g


def _goal_residual(spec, obj, target):
    d = obj - target
    return E.wrap_angle(d) if spec.angular_goal else d


def goal_energy(spec: E.EnvSpec, traj, goal, soft: bool = True, gamma: float = 1.0):
    """Distance of the object goal dims to ``goal``.

    Hard mode scores the final step only. Soft mode scores every step against
    the straight line from the first object value towards the goal (the
    shorter arc for angular goals).
    """
    t = _check(spec, traj)
    goal = spec.goal_vector(goal)
    cols = _state_cols(spec, spec.goal_idx)
    obj = t[:, cols]
    g = np.zeros_like(t)
    if not soft:
        d = _goal_residual(spec, obj[-1], goal)
        g[-1, cols] = 2 * d
        return float(d @ d), g
    hz = t.shape[0]
    u = (np.arange(hz) / hz)[:, None]
    w = _time_weights(hz, gamma)[:, None]
    if spec.angular_goal:
        # interpolate along the shorter arc
        target = obj[0] + u * E.wrap_angle(goal - obj[0])
    else:
        target = (1 - u) * obj[0] + u * goal
    d = _goal_residual(spec, obj, target)
    gd = 2 * w * d
    g[:, cols] = gd
    g[0, cols] -= np.sum(gd * (1 - u), axis=0)
    return float(np.sum(w * d * d)), g


def finger_activity_energy(spec: E.EnvSpec, traj, delta3: float = 0.01, temp: float | None = None):
    """Smooth penalty on steps where the actuators barely move.

    Per step the penalty is ``softplus((delta3 - m_t) / temp)`` where ``m_t``
    is the mean absolute actuator change; it vanishes for motion well above
    ``delta3``. ``temp`` defaults to ``delta3 / 4``.
    """
    t = _check(spec, traj)
    temp = delta3 / 4 if temp is None else temp
    cols = _state_cols(spec, spec.actuator_idx)
    x = t[:, cols]
    dx = np.diff(x, axis=0)
    m = np.mean(np.abs(dx), axis=1)
    z = (delta3 - m) / temp
    n = m.size
    e = float(np.mean(softplus(z)))
    # d e / d dx = (1/n) * sigmoid(z) * (-1/temp) * sign(dx) / k
    gdx = -(sigmoid(z) / (n * temp))[:, None] * np.sign(dx) / len(cols)
    g = np.zeros_like(t)
    g[1:, cols] += gdx
    g[:-1, cols] -= gdx
    return e, g


def _object_delta(spec: E.EnvSpec, cols, prev, cur) -> np.ndarray:
    d = cur - prev
    if spec.angular_goal:
        ang = np.isin(cols, _state_cols(spec, spec.goal_idx))
        d = np.where(ang, E.wrap_angle(d), d)
    return d


def penalty_project(spec: E.EnvSpec, traj, delta2: float = 0.15) -> np.ndarray:
    """Cap every per-step object change at ``delta2`` by resetting later steps.

    Steps are processed in time order, so each capped step shifts the value
    the next delta is measured from. Angular changes are measured along the
    shorter arc; capped angles are left unwrapped.
    """
    t = _check(spec, traj).copy()
    cols = _state_cols(spec, spec.object_idx)
    for k in range(1, t.shape[0]):
        prev = t[k - 1, cols]
        d = _object_delta(spec, cols, prev, t[k, cols])
        c = np.clip(d, -delta2, delta2)
        if np.array_equal(c, d):
            continue
        new = prev + c
        # float rounding can leave the measured delta a hair above the cap
        over = np.abs(_object_delta(spec, cols, prev, new)) > delta2
        while np.any(over):
            new = np.where(over, np.nextafter(new, prev), new)
            over = np.abs(_object_delta(spec, cols, prev, new)) > delta2
        t[k, cols] = new
    return t


def dynamics_fn(model):
    """``(energy, grad)`` of the learned-dynamics consistency on normalised rows."""
    from .dynmodel import dyn_energy, dyn_energy_grad

    def fn(traj):
        return dyn_energy(model, traj), dyn_energy_grad(model, traj)
    return fn


# -- phases and composition ----------------------------------------------------

def contact_distance(spec: E.EnvSpec, traj) -> float:
    t = np.asarray(traj)
    h, c = _state_cols(spec, spec.contact_pair)
    return float(abs(t[0, h] - t[0, c]))


def select_phase(spec: E.EnvSpec, traj, delta1: float = 0.1) -> str:
    """``"post"`` iff the hand is strictly within ``delta1`` of contact at step 0.

    Envs without a contact point are always post-contact.
    """
    if spec.contact_pair is None:
        return "post"
    return "post" if contact_distance(spec, traj) < delta1 else "pre"


def phase_blend(spec: E.EnvSpec, traj, delta1: float = 0.1) -> float:
    """Weight of post-phase terms: 1 inside ``delta1``, 0 beyond ``2*delta1``."""
    if spec.contact_pair is None:
        return 1.0
    d = contact_distance(spec, traj)
    return float(np.clip((2 * delta1 - d) / delta1, 0.0, 1.0))


def compose_gradient(terms, traj, phase, cfg: GuidanceConfig | None = None) -> np.ndarray:
    """``g = -sum_i w_i * grad e_i`` over the terms active in ``phase``.

    ``phase`` is ``"pre"``/``"post"``, or a float in [0, 1] giving the post
    weight of a blended mask. Projection-only terms contribute nothing.
    """
    t = np.asarray(traj, dtype=np.float64)
    g = np.zeros_like(t)
    for term in terms:
        if term.fn is None or term.weight == 0:
            continue
        if isinstance(phase, str):
            scale = 1.0 if term.active(phase) else 0.0
        else:
            scale = {"pre": 1.0 - phase, "post": float(phase), "both": 1.0}[term.phase]
        if scale == 0.0:
            continue
        gi = term.gradient(t)
        if not np.all(np.isfinite(gi)):
            raise GuidanceDivergence(term.name)
        g -= scale * term.weight * gi
    return g


def total_energy(terms, traj, phase) -> float:
    """Weighted energy whose negative gradient :func:`compose_gradient` returns."""
    e = 0.0
    for term in terms:
        if term.fn is None:
            continue
        if isinstance(phase, str):
            scale = 1.0 if term.active(phase) else 0.0
        else:
            scale = {"pre": 1.0 - phase, "post": float(phase), "both": 1.0}[term.phase]
        e += scale * term.weight * term.evaluate(traj)
    return e


# -- building terms for the planner --------------------------------------------

def env_units(fn, normalizer: Normalizer | None):
    """Lift an env-unit ``(energy, grad)`` function to normalised rows."""
    if normalizer is None:
        return fn
    scale = normalizer.row_scale

    def lifted(traj_n):
        e, g = fn(normalizer.unnormalize(traj_n))
        return e, np.asarray(g) * scale
    return lifted


def recipe_terms(spec: E.EnvSpec, goal, cfg: GuidanceConfig, mode: str = "full",
                 normalizer: Normalizer | None = None, dyn_model=None) -> list[EnergyTerm]:
    """Built-in term set for a planning mode on normalised trajectories.

    ``full`` uses alignment before contact, soft goal and the penalty after
    it and dynamics consistency throughout; envs without a contact point (in-hand rotation) use
    goal, finger activity, dynamics and the penalty throughout. ``naive_guide``
    keeps only the goal term with no phase split.
    """
    goal = spec.goal_vector(goal)

    def goal_fn(t):
        return goal_energy(spec, t, goal, soft=cfg.soft_goal, gamma=cfg.gamma)

    if mode == "naive_guide":
        return [EnergyTerm("goal", "both", cfg.weight("goal"), env_units(goal_fn, normalizer))]
    if mode != "full":
        raise ValueError(f"no guidance recipe for mode {mode!r}")

    def proj(t):
        return penalty_project(spec, t, cfg.delta2)

    terms = []
    if spec.contact_pair is None:
        post = "both"

        def act_fn(t):
            return finger_activity_energy(spec, t, cfg.delta3, cfg.activity_temp * cfg.delta3)
        terms.append(EnergyTerm("goal", post, cfg.weight("goal"), env_units(goal_fn, normalizer)))
        terms.append(EnergyTerm("activity", post, cfg.weight("activity"), env_units(act_fn, normalizer)))
    else:
        post = "post"

        def align_fn(t):
            return align_energy(spec, t, cfg.gamma)
        terms.append(EnergyTerm("align", "pre", cfg.weight("align"), env_units(align_fn, normalizer)))
        terms.append(EnergyTerm("goal", post, cfg.weight("goal"), env_units(goal_fn, normalizer)))
    if dyn_model is not None:
        # consistency matters in both phases
        terms.append(EnergyTerm("dyn", "both", cfg.weight("dyn"), dynamics_fn(dyn_model)))
    terms.append(EnergyTerm("penalty", post, 0.0, None, proj))
    return terms
