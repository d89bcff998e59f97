"""Deterministic toy contact environments.

Each environment has hand (directly actuated) state dimensions and object
dimensions that only move through contact. They are small enough that the
ghost-state gap between a plan and its physical replay can be measured
exactly.

Environments are addressed by id: ``"door1d"``, ``"hammer1d"``, ``"disk"``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

HALF_PI = math.pi / 2


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    return y if np.ndim(y) else float(y)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_dim: int
    act_dim: int
    hand_idx: tuple[int, ...]
    object_idx: tuple[int, ...]
    goal_idx: tuple[int, ...]
    action_bounds: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray
    # (hand position index, contact-point index); None for in-hand tasks
    contact_pair: tuple[int, int] | None
    actuator_idx: tuple[int, ...]
    delta_c: float = 0.1
    delta_2: float = 0.15
    delta_3: float = 0.01
    train_goal: float = 0.0
    episode_len: int = 80
    angular_goal: bool = False
    step_fn: Callable = field(default=None, repr=False, compare=False)
    reset_fn: Callable = field(default=None, repr=False, compare=False)
    expert_fn: Callable = field(default=None, repr=False, compare=False)

    def clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(self.act_dim)
        return np.clip(a, -self.action_bounds, self.action_bounds)

    def goal_vector(self, goal) -> np.ndarray:
        g = np.atleast_1d(np.asarray(goal, dtype=np.float64))
        if g.shape != (len(self.goal_idx),):
            raise ValueError(f"{self.env_id}: goal must have {len(self.goal_idx)} entries")
        return g

    def validate_goal(self, goal) -> np.ndarray:
        g = self.goal_vector(goal)
        lo = self.state_low[list(self.goal_idx)]
        hi = self.state_high[list(self.goal_idx)]
        if np.any(g < lo) or np.any(g > hi):
            raise ValueError(f"{self.env_id}: goal {g.tolist()} outside clamps [{lo.tolist()}, {hi.tolist()}]")
        return g


# -- Door1D -------------------------------------------------------------------
# state = [p, grip, latch, hinge, handle_x]; action = [dp, dgrip]

DOOR_HANDLE_X0 = 1.0
DOOR_LEVER = 0.5
DOOR_LATCH_OPEN = math.pi / 4
DOOR_HINGE_MAX = 2 * math.pi / 3


def door_handle_x(hinge):
    return DOOR_HANDLE_X0 - DOOR_LEVER * hinge


def _door_step(spec: EnvSpec, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    p, grip, latch, hinge, handle = s
    dp, dg = a
    out = s.copy()
    out[1] = min(max(grip + dg, 0.0), 1.0)
    contact = abs(p - handle) < spec.delta_c
    if contact:
        out[2] = min(max(latch + dg, 0.0), HALF_PI)
    if contact and latch >= DOOR_LATCH_OPEN:
        new_hinge = min(max(hinge - dp / DOOR_LEVER, 0.0), DOOR_HINGE_MAX)
        out[3] = new_hinge
        out[4] = door_handle_x(new_hinge)
    out[0] = min(max(p + dp, spec.state_low[0]), spec.state_high[0])
    return out


def _door_reset(spec: EnvSpec, rng: np.random.Generator, hinge: float = 0.0) -> np.ndarray:
    p = rng.uniform(0.0, 0.3)
    return np.array([p, 0.0, 0.0, hinge, door_handle_x(hinge)])


def _door_expert(spec: EnvSpec, s: np.ndarray, goal, pull_speed: float | None = None) -> np.ndarray:
    p, grip, latch, hinge, handle = s
    err = float(np.atleast_1d(goal)[0]) - hinge
    bp, bg = spec.action_bounds
    if abs(p - handle) >= spec.delta_c:
        return np.array([np.clip(handle - p, -bp, bp), 0.0])
    if latch < DOOR_LATCH_OPEN:
        return np.array([np.clip(handle - p, -bp, bp), bg])
    if abs(err) < 0.02:
        return np.zeros(2)
    # pulling (negative dp) opens the door, pushing closes it
    v = bp if pull_speed is None else min(pull_speed, bp)
    return np.array([np.clip(-DOOR_LEVER * err, -v, v), 0.0])


# -- Hammer1D -----------------------------------------------------------------
# state = [p_hand, p_hammer, d_nail]; action = [dp]

NAIL_X = 1.0
NAIL_MAX = 0.09
STRIKE_GAIN = 0.5
HAMMER_REST = 0.6


def _hammer_step(spec: EnvSpec, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    hand, hammer, d = s
    dp = a[0]
    out = s.copy()
    new_hand = min(max(hand + dp, spec.state_low[0]), spec.state_high[0])
    out[0] = new_hand
    if abs(hand - hammer) < spec.delta_c:
        moved = new_hand - hand
        new_hammer = hammer + moved
        if moved > 0 and hammer < NAIL_X <= new_hammer:
            out[2] = min(max(d + STRIKE_GAIN * moved, 0.0), NAIL_MAX)
            # head stops on the nail; the hand stays on the handle
            back = new_hammer - NAIL_X
            new_hammer = NAIL_X
            out[0] = new_hand - back
        out[1] = min(max(new_hammer, spec.state_low[1]), NAIL_X)
    return out


def _hammer_reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(0.0, 0.2), rng.uniform(0.4, 0.6), 0.0])


def _hammer_expert(spec: EnvSpec, s: np.ndarray, goal, strike_speed: float = 0.1) -> np.ndarray:
    hand, hammer, d = s
    b = spec.action_bounds[0]
    if abs(hand - hammer) >= spec.delta_c:
        return np.array([np.clip(hammer - hand, -b, b)])
    remaining = float(np.atleast_1d(goal)[0]) - d
    if remaining <= 1e-9 or d >= NAIL_MAX - 1e-9:
        # done: back off to the rest position and hold
        return np.array([max(HAMMER_REST - hammer, -b) if hammer > HAMMER_REST else 0.0])
    if hammer >= NAIL_X - 1e-9:
        return np.array([-b])
    speed = min(strike_speed, remaining / STRIKE_GAIN, b)
    gap = NAIL_X - hammer
    if gap > speed:
        # stop just short so the next step crosses the nail at `speed`
        return np.array([min(b, gap - 0.999 * speed)])
    return np.array([speed])


# -- DiskReorient -------------------------------------------------------------
# state = [f1, f2, f3, theta]; action = [df1, df2, df3]

DISK_GAIN = 2.0
FINGER_LIM = 2.0


def _disk_step(spec: EnvSpec, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = s.copy()
    f_old = s[:3]
    f_new = np.clip(f_old + a, -FINGER_LIM, FINGER_LIM)
    df = f_new - f_old
    out[:3] = f_new
    if np.mean(np.abs(df)) > spec.delta_3:
        out[3] = wrap_angle(s[3] + DISK_GAIN * np.mean(df))
    return out


def _disk_reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    # any start orientation, so demos turn both ways even for goals in (0, pi)
    return np.array([0.0, 0.0, 0.0, rng.uniform(-math.pi, math.pi)])


def _disk_expert(spec: EnvSpec, s: np.ndarray, goal, direction: int = 0) -> np.ndarray:
    target = float(np.atleast_1d(goal)[0])
    err = wrap_angle(target - s[3])
    # a forced direction (+1 or -1) takes the long way round while far away
    if direction and abs(err) > 0.5 and math.copysign(1, err) != direction:
        err += direction * 2 * math.pi
    if abs(err) < 0.03:
        return np.zeros(3)
    b = spec.action_bounds
    # command a rotation of at most 0.12 rad per step through equal finger motion
    dtheta = float(np.clip(0.8 * err, -0.12, 0.12))
    df = np.full(3, dtheta / DISK_GAIN)
    if np.mean(np.abs(df)) <= spec.delta_3:
        df = np.full(3, math.copysign(spec.delta_3 * 1.05, err))
    return np.clip(df, -b, b)


# -- registry -----------------------------------------------------------------

DOOR1D = EnvSpec(
    env_id="door1d", obs_dim=5, act_dim=2,
    hand_idx=(0, 1), object_idx=(2, 3, 4), goal_idx=(3,),
    action_bounds=np.array([0.05, 0.1]),
    state_low=np.array([-0.5, 0.0, 0.0, 0.0, DOOR_HANDLE_X0 - DOOR_LEVER * DOOR_HINGE_MAX]),
    state_high=np.array([1.5, 1.0, HALF_PI, DOOR_HINGE_MAX, DOOR_HANDLE_X0]),
    contact_pair=(0, 4), actuator_idx=(0, 1),
    train_goal=HALF_PI, episode_len=100,
    step_fn=_door_step, reset_fn=_door_reset, expert_fn=_door_expert,
)

HAMMER1D = EnvSpec(
    env_id="hammer1d", obs_dim=3, act_dim=1,
    hand_idx=(0,), object_idx=(1, 2), goal_idx=(2,),
    action_bounds=np.array([0.1]),
    state_low=np.array([-0.5, -0.5, 0.0]),
    state_high=np.array([1.5, NAIL_X, NAIL_MAX]),
    contact_pair=(0, 1), actuator_idx=(0,),
    train_goal=NAIL_MAX, episode_len=64,
    step_fn=_hammer_step, reset_fn=_hammer_reset, expert_fn=_hammer_expert,
)

DISK = EnvSpec(
    env_id="disk", obs_dim=4, act_dim=3,
    hand_idx=(0, 1, 2), object_idx=(3,), goal_idx=(3,),
    action_bounds=np.array([0.1, 0.1, 0.1]),
    state_low=np.array([-FINGER_LIM] * 3 + [-math.pi]),
    state_high=np.array([FINGER_LIM] * 3 + [math.pi]),
    contact_pair=None, actuator_idx=(0, 1, 2),
    train_goal=HALF_PI, episode_len=96, angular_goal=True,
    step_fn=_disk_step, reset_fn=_disk_reset, expert_fn=_disk_expert,
)

ENVS = {e.env_id: e for e in (DOOR1D, HAMMER1D, DISK)}


def get_env(env_id: str) -> EnvSpec:
    try:
        return ENVS[env_id]
    except KeyError:
        raise KeyError(f"unknown env id {env_id!r}; expected one of {sorted(ENVS)}") from None


# -- public operations --------------------------------------------------------

def step(spec: EnvSpec, state, action) -> np.ndarray:
    """Advance one step. Actions are clipped to the spec bounds."""
    s = np.asarray(state, dtype=np.float64).reshape(spec.obs_dim)
    a = np.asarray(action, dtype=np.float64).reshape(spec.act_dim)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise ValueError(f"{spec.env_id}: non-finite state or action")
    return spec.step_fn(spec, s, spec.clip_action(a))


def reset(spec: EnvSpec, seed: int | np.random.Generator) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return spec.reset_fn(spec, rng)


def in_contact(spec: EnvSpec, state) -> bool:
    if spec.contact_pair is None:
        return True
    h, c = spec.contact_pair
    return abs(state[h] - state[c]) < spec.delta_c


def goal_error(spec: EnvSpec, state, goal) -> float:
    g = spec.goal_vector(goal)
    diff = np.asarray(state)[list(spec.goal_idx)] - g
    if spec.angular_goal:
        diff = wrap_angle(diff)
    return float(np.max(np.abs(diff)))


SUCCESS_TOL = {"door1d": 0.1, "hammer1d": 0.01, "disk": 0.15}
HOLD_STEPS = 5


def success(spec: EnvSpec, states, goal) -> bool:
    """Success predicate over a rollout's state sequence (rows are states).

    Door and disk must stay within tolerance over the final five states; the
    hammer is judged on the final nail depth.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("empty rollout")
    tol = SUCCESS_TOL[spec.env_id]
    if spec.env_id == "hammer1d":
        return goal_error(spec, states[-1], goal) < tol
    if states.shape[0] < HOLD_STEPS:
        return False
    return all(goal_error(spec, s, goal) < tol for s in states[-HOLD_STEPS:])


def settled(spec: EnvSpec, states, goal) -> bool:
    """Whether a rollout may stop early because its success can no longer change.

    Hold-based predicates (door, disk) settle once they hold. The hammer is
    judged on the final depth of a full-length episode, so it never settles.
    """
    if spec.env_id == "hammer1d":
        return False
    return success(spec, states, goal)


def expert_action(spec: EnvSpec, state, goal, **kw) -> np.ndarray:
    return spec.clip_action(spec.expert_fn(spec, np.asarray(state, dtype=np.float64), goal, **kw))


def ghost_metric(spec: EnvSpec, pred_states, pred_actions, std) -> float:
    """Mean per-step normalised distance between a plan and its simulated replay.

    The replay starts at ``pred_states[0]`` and applies ``pred_actions`` through
    :func:`step`. Dimensions with zero ``std`` are dropped.
    """
    pred_states = np.asarray(pred_states, dtype=np.float64)
    pred_actions = np.asarray(pred_actions, dtype=np.float64)
    if pred_states.ndim != 2 or pred_states.shape[1] != spec.obs_dim:
        raise ValueError(f"predicted states must be H x {spec.obs_dim}")
    if pred_actions.shape != (pred_states.shape[0], spec.act_dim):
        raise ValueError(f"predicted actions must be H x {spec.act_dim}")
    std = np.asarray(std, dtype=np.float64)
    keep = std > 0
    if not np.all(keep):
        log.warning("ghost_metric: excluding zero-variance dims %s", np.flatnonzero(~keep).tolist())
    sim = np.empty_like(pred_states)
    sim[0] = pred_states[0]
    for t in range(pred_states.shape[0] - 1):
        sim[t + 1] = step(spec, sim[t], pred_actions[t])
    diff = (pred_states - sim)[:, keep] / std[keep]
    if spec.angular_goal:
        ang = [k for k, i in enumerate(np.flatnonzero(keep)) if i in spec.goal_idx]
        for k in ang:
            raw = (pred_states - sim)[:, np.flatnonzero(keep)[k]]
            diff[:, k] = wrap_angle(raw) / std[np.flatnonzero(keep)[k]]
    return float(np.mean(np.linalg.norm(diff, axis=1)))
