"""Trajectory denoiser that predicts the clean trajectory directly.

The network is a fully connected stack over the flattened noisy trajectory,
a sinusoidal embedding of the diffusion step and (optionally) a condition
vector with a presence flag. The all-zero condition block is the null token
used for classifier-free training and composition.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import Normalizer
from .schedule import NoiseSchedule, make_schedule, q_sample_batch

log = logging.getLogger(__name__)

STEP_EMBED_DIM = 16


class TrainingError(RuntimeError):
    pass


class UnsupportedMode(ValueError):
    pass


def step_embedding(i, n_steps: int) -> np.ndarray:
    """16 sinusoidal features of ``i / n_steps`` (rows for array input)."""
    u = np.atleast_1d(np.asarray(i, dtype=np.float64)) / n_steps
    freqs = (np.pi / 2) * 2.0 ** np.arange(STEP_EMBED_DIM // 2)
    ang = u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 1e-3
    n_steps: int = 20
    schedule: str = "cosine"
    cond_dropout: float = 0.25
    hidden: tuple[int, ...] = (256, 256, 256)
    seed: int = 0
    # keep row-0 state entries clean in the noisy input, matching how
    # sampling substitutes the observed start state
    clean_first_state: bool = True
    log_every: int = 100
    # cosine decay of the learning rate to zero over training
    lr_decay: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0 or self.n_steps < 2:
            raise ValueError("steps, batch size, learning rate and N must be positive")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("condition dropout must lie in [0, 1]")


@dataclass
class DenoiserModel:
    params: dc.MlpParams
    horizon: int
    obs_dim: int
    act_dim: int
    n_steps: int
    cond_dim: int = 0
    schedule_kind: str = "cosine"
    normalizer: Normalizer | None = None
    env_id: str = ""
    clean_first_state: bool = True
    loss_log: list = field(default_factory=list)

    @property
    def row_dim(self) -> int:
        return self.obs_dim + self.act_dim

    @property
    def traj_size(self) -> int:
        return self.horizon * self.row_dim

    @property
    def input_size(self) -> int:
        return self.traj_size + STEP_EMBED_DIM + (self.cond_dim + 1 if self.cond_dim else 0)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.n_steps, self.schedule_kind)

    @classmethod
    def create(cls, horizon, obs_dim, act_dim, n_steps=20, cond_dim=0, hidden=(256, 256, 256),
               seed=0, **kw) -> "DenoiserModel":
        m = cls(dc.MlpParams.zeros([1, 1]), horizon, obs_dim, act_dim, n_steps, cond_dim, **kw)
        m.params = dc.MlpParams.init([m.input_size, *hidden, m.traj_size], seed=seed)
        return m

    # -- io -------------------------------------------------------------------
    def meta(self) -> dict:
        return {
            "kind": "denoiser", "horizon": self.horizon, "obs_dim": self.obs_dim,
            "act_dim": self.act_dim, "n_steps": self.n_steps, "cond_dim": self.cond_dim,
            "schedule": self.schedule_kind, "env_id": self.env_id,
            "clean_first_state": self.clean_first_state,
            "normalizer": self.normalizer.to_dict() if self.normalizer else None,
        }

    def save(self, path) -> None:
        dc.save_model(path, self.meta(), self.params)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        meta, params = dc.load_model(path)
        if meta.get("kind") != "denoiser":
            raise dc.CheckpointError(f"{path}: not a denoiser checkpoint")
        norm = Normalizer.from_dict(meta["normalizer"]) if meta["normalizer"] else None
        m = cls(params, meta["horizon"], meta["obs_dim"], meta["act_dim"], meta["n_steps"],
                meta["cond_dim"], meta["schedule"], norm, meta["env_id"], meta["clean_first_state"])
        if params.sizes[0] != m.input_size or params.sizes[-1] != m.traj_size:
            raise dc.ShapeError(f"{path}: weight shapes disagree with header")
        return m


def _cond_block(model: DenoiserModel, cond, batch: int) -> np.ndarray:
    if model.cond_dim == 0:
        if cond is not None:
            raise UnsupportedMode("model was trained without a condition")
        return np.zeros((batch, 0))
    block = np.zeros((batch, model.cond_dim + 1))
    if cond is not None:
        c = np.asarray(cond, dtype=np.float64).reshape(-1, model.cond_dim)
        if c.shape[0] not in (1, batch):
            raise dc.ShapeError("condition batch does not match trajectory batch")
        block[:, :model.cond_dim] = c
        block[:, model.cond_dim] = 1.0
    return block


def _inputs(model: DenoiserModel, x: np.ndarray, i, cond) -> np.ndarray:
    b = x.shape[0]
    emb = step_embedding(i, model.n_steps)
    if emb.shape[0] == 1 and b > 1:
        emb = np.repeat(emb, b, axis=0)
    return np.concatenate([x.reshape(b, -1), emb, _cond_block(model, cond, b)], axis=1)


def predict_x0(model: DenoiserModel, x_t, i: int, cond=None) -> np.ndarray:
    """Clean-trajectory estimate for a noisy (normalised) trajectory.

    ``x_t`` is ``H x D`` or a batch ``B x H x D``; the result has the same
    shape. ``cond=None`` selects the null-condition branch.
    """
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (model.horizon, model.row_dim):
        raise dc.ShapeError(f"trajectory shape {x.shape[1:]} != {(model.horizon, model.row_dim)}")
    if not 1 <= i <= model.n_steps:
        raise IndexError(f"diffusion step {i} outside 1..{model.n_steps}")
    out = dc.mlp_forward(model.params, _inputs(model, x, i, cond)).reshape(x.shape)
    return out[0] if single else out


def cf_compose(model: DenoiserModel, x_t, i: int, cond, omega: float) -> np.ndarray:
    """Classifier-free blend in clean-trajectory space."""
    if model.cond_dim == 0:
        raise UnsupportedMode("classifier-free composition needs a conditional model")
    uncond = predict_x0(model, x_t, i, None)
    if omega == 0:
        return uncond
    return uncond + omega * (predict_x0(model, x_t, i, cond) - uncond)


def cosine_lr(base: float, it: int, total: int) -> float:
    return 0.5 * base * (1.0 + np.cos(np.pi * it / total))


def train(dataset: np.ndarray, cfg: TrainConfig, conds: np.ndarray | None = None,
          obs_dim: int | None = None, normalizer: Normalizer | None = None,
          env_id: str = "") -> DenoiserModel:
    """Fit the denoiser on normalised windows ``M x H x D``.

    ``conds`` (``M x C``) enables classifier-free training with
    ``cfg.cond_dropout``. ``obs_dim`` splits rows into ``[action, state]``;
    when omitted the rows are treated as pure state.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty M x H x D array")
    m, h, d = data.shape
    obs_dim = d if obs_dim is None else obs_dim
    act_dim = d - obs_dim
    cond_dim = 0 if conds is None else np.asarray(conds).reshape(m, -1).shape[1]
    if conds is not None:
        conds = np.asarray(conds, dtype=np.float64).reshape(m, cond_dim)
    clean_first = cfg.clean_first_state and h > 1
    model = DenoiserModel.create(h, obs_dim, act_dim, cfg.n_steps, cond_dim, cfg.hidden, cfg.seed,
                                 schedule_kind=cfg.schedule, normalizer=normalizer, env_id=env_id,
                                 clean_first_state=clean_first)
    sched = model.schedule()
    emb_table = step_embedding(np.arange(cfg.n_steps + 1), cfg.n_steps)
    rng = np.random.default_rng(cfg.seed)
    state = dc.AdamState.for_params(model.params, lr=cfg.lr)
    bsz = cfg.batch_size
    for it in range(cfg.steps):
        if cfg.lr_decay:
            state.lr = cosine_lr(cfg.lr, it, cfg.steps)
        idx = rng.integers(0, m, size=bsz)
        steps = rng.integers(1, cfg.n_steps + 1, size=bsz)
        x0 = data[idx]
        noise = rng.standard_normal(x0.shape)
        xt = q_sample_batch(sched, x0, steps, noise)
        if clean_first:
            xt[:, 0, act_dim:] = x0[:, 0, act_dim:]
        parts = [xt.reshape(bsz, -1), emb_table[steps]]
        if cond_dim:
            block = np.zeros((bsz, cond_dim + 1))
            keep = rng.random(bsz) >= cfg.cond_dropout
            block[keep, :cond_dim] = conds[idx[keep]]
            block[keep, cond_dim] = 1.0
            parts.append(block)
        inp = np.concatenate(parts, axis=1)
        out = dc.mlp_forward(model.params, inp)
        err = out - x0.reshape(bsz, -1)
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise TrainingError(f"denoiser loss diverged at step {it}")
        grads, _ = dc.mlp_backward(model.params, inp, 2.0 * err / err.size)
        dc.adam_step_inplace(state, model.params, grads)
        if it % cfg.log_every == 0 or it == cfg.steps - 1:
            model.loss_log.append((it, loss))
    if not model.params.is_finite():
        raise TrainingError("denoiser parameters became non-finite")
    return model


def sample(model: DenoiserModel, n: int, rng: np.random.Generator, cond=None) -> np.ndarray:
    """Plain ancestral sampling of ``n`` trajectories (no guidance)."""
    from .schedule import posterior_step

    sched = model.schedule()
    x = rng.standard_normal((n, model.horizon, model.row_dim))
    for i in range(model.n_steps, 0, -1):
        x0 = predict_x0(model, x, i, cond)
        x = posterior_step(sched, x0, x, i, 0.0, None, rng)
    return x
