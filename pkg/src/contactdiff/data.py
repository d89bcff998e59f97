"""Scripted demonstrations, trajectory windows, normalisation and demo files."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import envs as E

DEMO_MAGIC = b"CDD1"


class CollectionError(RuntimeError):
    pass


class DemoFormatError(ValueError):
    pass


class DimensionError(DemoFormatError):
    pass


@dataclass
class Episode:
    states: np.ndarray       # T x obs
    actions: np.ndarray      # T x act
    next_states: np.ndarray  # T x obs

    def __len__(self):
        return self.states.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.next_states[-1]


@dataclass
class DemoSet:
    env_id: str
    episodes: list[Episode]
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stats:
            self.stats = compute_stats(self.episodes)

    @property
    def spec(self) -> E.EnvSpec:
        return E.get_env(self.env_id)

    def __eq__(self, other):
        if not isinstance(other, DemoSet) or self.env_id != other.env_id:
            return False
        if len(self.episodes) != len(other.episodes):
            return False
        return all(
            np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
            and np.array_equal(a.next_states, b.next_states)
            for a, b in zip(self.episodes, other.episodes)
        )

    def transitions(self):
        s = np.concatenate([e.states for e in self.episodes])
        a = np.concatenate([e.actions for e in self.episodes])
        n = np.concatenate([e.next_states for e in self.episodes])
        return s, a, n


def compute_stats(episodes: list[Episode]) -> dict:
    if not episodes:
        raise ValueError("empty DemoSet")
    s = np.concatenate([np.concatenate([e.states, e.next_states]) for e in episodes])
    a = np.concatenate([e.actions for e in episodes])
    st = {
        "obs_min": s.min(0), "obs_max": s.max(0), "obs_mean": s.mean(0), "obs_std": s.std(0),
        "act_min": a.min(0), "act_max": a.max(0), "act_mean": a.mean(0), "act_std": a.std(0),
    }
    st["obs_constant"] = st["obs_max"] <= st["obs_min"]
    st["act_constant"] = st["act_max"] <= st["act_min"]
    return st


# -- collection ---------------------------------------------------------------

DEFAULT_NOISE = {"door1d": 0.1, "hammer1d": 0.03, "disk": 0.1}
# per-step chance of starting a short hesitation (zero action) and its length range
DEFAULT_PAUSE = {"door1d": 0.08, "hammer1d": 0.08, "disk": 0.15}
PAUSE_LEN = (2, 6)
# chance that a disk demo turns the long way round, when that needs at most
# DISK_LONG_MAX rad
DISK_LONG_WAY = 0.3
DISK_LONG_MAX = 3.5


def training_goal(spec: E.EnvSpec, rng: np.random.Generator) -> float:
    """Goal used for demonstrations. The disk draws a fresh goal in (0, pi)."""
    if spec.env_id == "disk":
        return float(rng.uniform(0.4, math.pi - 0.4))
    return spec.train_goal


def collect_demos(spec: E.EnvSpec, episodes: int, seed: int = 0, expert=None,
                  noise: float | None = None, pause: float | None = None) -> DemoSet:
    """Roll out a scripted expert ``episodes`` times.

    ``noise`` is the std of Gaussian action noise as a fraction of the action
    bound and ``pause`` the per-step chance of a brief hesitation (both
    default per env). The built-in experts also draw a per-episode speed.
    Every episode must end in success on its training goal; otherwise
    :class:`CollectionError` is raised.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    noise = DEFAULT_NOISE[spec.env_id] if noise is None else noise
    pause = DEFAULT_PAUSE[spec.env_id] if pause is None else pause
    out = []
    for ep in range(episodes):
        rng = np.random.default_rng([seed, ep])
        goal = training_goal(spec, rng)
        kw = {}
        if spec.env_id == "hammer1d":
            kw["strike_speed"] = float(rng.uniform(0.06, 0.1))
        elif spec.env_id == "door1d":
            kw["pull_speed"] = float(rng.uniform(0.03, 0.05))
        s = E.reset(spec, rng)
        if spec.env_id == "disk":
            err = E.wrap_angle(goal - s[3])
            if rng.random() < DISK_LONG_WAY and 2 * math.pi - abs(err) <= DISK_LONG_MAX:
                kw["direction"] = -int(math.copysign(1, err))
        S, A, N = [], [], []
        hold = 0
        for _ in range(spec.episode_len):
            if hold == 0 and pause > 0 and rng.random() < pause:
                hold = int(rng.integers(PAUSE_LEN[0], PAUSE_LEN[1] + 1))
            if hold > 0:
                hold -= 1
                a = np.zeros(spec.act_dim)
            elif expert is None:
                a = E.expert_action(spec, s, goal, **kw)
            else:
                a = spec.clip_action(expert(s, goal))
            if noise > 0:
                a = spec.clip_action(a + noise * spec.action_bounds * rng.standard_normal(spec.act_dim))
            s2 = E.step(spec, s, a)
            S.append(s)
            A.append(a)
            N.append(s2)
            s = s2
        if not E.success(spec, N, goal):
            raise CollectionError(f"expert failed {spec.env_id} episode {ep} (seed {seed})")
        out.append(Episode(np.array(S), np.array(A), np.array(N)))
    return DemoSet(spec.env_id, out)


def episode_goal(spec: E.EnvSpec, episode: Episode) -> np.ndarray:
    """Goal the episode actually achieved (object goal dims of its final state)."""
    return episode.terminal[list(spec.goal_idx)].copy()


# -- windows ------------------------------------------------------------------

def episode_rows(episode: Episode) -> np.ndarray:
    """Rows ``[a_t, s_t]`` for every transition of the episode."""
    return np.concatenate([episode.actions, episode.states], axis=1)


def window_dataset(demos: DemoSet, horizon: int, with_index: bool = False):
    """All length-``horizon`` windows of ``[action, state]`` rows.

    Windows never cross episode boundaries. Episodes shorter than the horizon
    are padded with the terminal state and zero actions. With ``with_index``
    the result is ``(windows, [(episode, offset), ...])``.
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    wins, idx = [], []
    for e, ep in enumerate(demos.episodes):
        rows = episode_rows(ep)
        if rows.shape[0] < horizon:
            pad_row = np.concatenate([np.zeros(ep.actions.shape[1]), ep.terminal])
            rows = np.concatenate([rows, np.tile(pad_row, (horizon - rows.shape[0], 1))])
        for k in range(rows.shape[0] - horizon + 1):
            wins.append(rows[k:k + horizon].copy())
            idx.append((e, k))
    wins = np.array(wins) if wins else np.zeros((0, horizon, 0))
    return (wins, idx) if with_index else wins


# -- normaliser ---------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-dimension min-max map onto [-1, 1] for actions and states."""
    act_offset: np.ndarray
    act_scale: np.ndarray
    obs_offset: np.ndarray
    obs_scale: np.ndarray

    @property
    def act_dim(self):
        return self.act_offset.size

    @property
    def row_offset(self):
        return np.concatenate([self.act_offset, self.obs_offset])

    @property
    def row_scale(self):
        return np.concatenate([self.act_scale, self.obs_scale])

    def normalize_obs(self, x):
        return (np.asarray(x) - self.obs_offset) / self.obs_scale

    def unnormalize_obs(self, x):
        return np.asarray(x) * self.obs_scale + self.obs_offset

    def normalize_act(self, x):
        return (np.asarray(x) - self.act_offset) / self.act_scale

    def unnormalize_act(self, x):
        return np.asarray(x) * self.act_scale + self.act_offset

    def normalize(self, rows):
        """Rows laid out as ``[action, state]``."""
        return (np.asarray(rows) - self.row_offset) / self.row_scale

    def unnormalize(self, rows):
        return np.asarray(rows) * self.row_scale + self.row_offset

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("act_offset", "act_scale", "obs_offset", "obs_scale")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _minmax(lo, hi):
    const = hi <= lo
    offset = np.where(const, lo, 0.5 * (hi + lo))
    scale = np.where(const, 1.0, 0.5 * (hi - lo))
    return offset, scale


def fit_normalizer(demos: DemoSet) -> Normalizer:
    if not demos.episodes:
        raise ValueError("cannot fit a normalizer on an empty DemoSet")
    st = demos.stats
    ao, as_ = _minmax(st["act_min"], st["act_max"])
    oo, os_ = _minmax(st["obs_min"], st["obs_max"])
    return Normalizer(ao, as_, oo, os_)


# -- files --------------------------------------------------------------------

def save_demos(path, demos: DemoSet) -> None:
    spec = demos.spec
    eid = demos.env_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(DEMO_MAGIC)
        f.write(struct.pack("<I", len(eid)))
        f.write(eid)
        f.write(struct.pack("<III", spec.obs_dim, spec.act_dim, len(demos.episodes)))
        for ep in demos.episodes:
            f.write(struct.pack("<I", len(ep)))
            rows = np.concatenate([ep.states, ep.actions, ep.next_states], axis=1)
            f.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def _read(f, n):
    b = f.read(n)
    if len(b) != n:
        raise DemoFormatError("truncated demo file")
    return b


def load_demos(path, env: str | E.EnvSpec | None = None) -> DemoSet:
    """Read a demo file; with ``env`` the header dims must match that env."""
    with open(path, "rb") as f:
        if _read(f, 4) != DEMO_MAGIC:
            raise DemoFormatError(f"{path}: bad magic, not a demo file")
        (n,) = struct.unpack("<I", _read(f, 4))
        if n > 256:
            raise DemoFormatError(f"{path}: implausible env-id length {n}")
        env_id = _read(f, n).decode("utf-8")
        obs_dim, act_dim, n_ep = struct.unpack("<III", _read(f, 12))
        if env is not None:
            spec = E.get_env(env) if isinstance(env, str) else env
            if (spec.obs_dim, spec.act_dim) != (obs_dim, act_dim):
                raise DimensionError(
                    f"{path}: file dims obs={obs_dim}, act={act_dim} (env {env_id!r}) do not match "
                    f"{spec.env_id!r} obs={spec.obs_dim}, act={spec.act_dim}"
                )
            if spec.env_id != env_id:
                raise DimensionError(f"{path}: recorded for {env_id!r}, not {spec.env_id!r}")
        spec = E.get_env(env_id)
        if (spec.obs_dim, spec.act_dim) != (obs_dim, act_dim):
            raise DimensionError(f"{path}: header dims disagree with registered env {env_id!r}")
        width = 2 * obs_dim + act_dim
        eps = []
        for _ in range(n_ep):
            (length,) = struct.unpack("<I", _read(f, 4))
            if length == 0:
                raise DemoFormatError(f"{path}: empty episode")
            rows = np.frombuffer(_read(f, 8 * length * width), dtype="<f8").reshape(length, width)
            rows = rows.astype(np.float64)
            eps.append(Episode(rows[:, :obs_dim].copy(), rows[:, obs_dim:obs_dim + act_dim].copy(),
                               rows[:, obs_dim + act_dim:].copy()))
        if f.read(1):
            raise DemoFormatError(f"{path}: trailing bytes after last episode")
    return DemoSet(env_id, eps)
