"""Learned one-step forward model and the dynamics-consistency energy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import DemoSet, Normalizer, fit_normalizer
from .denoiser import TrainingError, cosine_lr


@dataclass
class DynTrainConfig:
    steps: int = 6000
    batch_size: int = 128
    lr: float = 2e-3
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 0
    holdout: float = 0.2
    log_every: int = 100


@dataclass
class DynamicsModel:
    """Predicts the normalised next state as ``s + f(s, a)``."""
    params: dc.MlpParams
    env_id: str
    obs_dim: int
    act_dim: int
    normalizer: Normalizer
    residual_mse: float = float("nan")
    heldout_mse: float = float("nan")
    loss_log: list = field(default_factory=list)

    def predict(self, s_norm, a_norm) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s_norm, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a_norm, dtype=np.float64))
        return s + dc.mlp_forward(self.params, np.concatenate([s, a], axis=1))

    def predict_env(self, state, action) -> np.ndarray:
        """Next state in environment units."""
        n = self.normalizer
        out = self.predict(n.normalize_obs(state), n.normalize_act(action))
        return n.unnormalize_obs(out)

    def meta(self) -> dict:
        return {"kind": "dynamics", "env_id": self.env_id, "obs_dim": self.obs_dim,
                "act_dim": self.act_dim, "normalizer": self.normalizer.to_dict(),
                "residual_mse": self.residual_mse, "heldout_mse": self.heldout_mse}

    def save(self, path) -> None:
        dc.save_model(path, self.meta(), self.params)

    @classmethod
    def load(cls, path) -> "DynamicsModel":
        meta, params = dc.load_model(path)
        if meta.get("kind") != "dynamics":
            raise dc.CheckpointError(f"{path}: not a dynamics checkpoint")
        return cls(params, meta["env_id"], meta["obs_dim"], meta["act_dim"],
                   Normalizer.from_dict(meta["normalizer"]), meta["residual_mse"], meta["heldout_mse"])


def _split(demos: DemoSet, holdout: float):
    n = len(demos.episodes)
    n_test = int(round(holdout * n)) if n > 1 else 0
    train_eps = demos.episodes[: n - n_test]
    test_eps = demos.episodes[n - n_test:]
    return train_eps, test_eps


def _stack(eps, norm: Normalizer):
    s = np.concatenate([e.states for e in eps])
    a = np.concatenate([e.actions for e in eps])
    n = np.concatenate([e.next_states for e in eps])
    return norm.normalize_obs(s), norm.normalize_act(a), norm.normalize_obs(n)


def one_step_mse(model: DynamicsModel, demos_or_eps) -> float:
    eps = demos_or_eps.episodes if isinstance(demos_or_eps, DemoSet) else demos_or_eps
    s, a, n = _stack(eps, model.normalizer)
    return float(np.mean((model.predict(s, a) - n) ** 2))


def train_dynamics(demos: DemoSet, cfg: DynTrainConfig | None = None,
                   normalizer: Normalizer | None = None) -> DynamicsModel:
    """Fit the forward model; the last ``cfg.holdout`` of episodes is held out."""
    cfg = cfg or DynTrainConfig()
    if not demos.episodes:
        raise ValueError("cannot train dynamics on an empty DemoSet")
    norm = normalizer or fit_normalizer(demos)
    spec = demos.spec
    train_eps, test_eps = _split(demos, cfg.holdout)
    s, a, n = _stack(train_eps, norm)
    x = np.concatenate([s, a], axis=1)
    target = n - s
    params = dc.MlpParams.init([spec.obs_dim + spec.act_dim, *cfg.hidden, spec.obs_dim], seed=cfg.seed)
    model = DynamicsModel(params, spec.env_id, spec.obs_dim, spec.act_dim, norm)
    rng = np.random.default_rng(cfg.seed)
    state = dc.AdamState.for_params(params, lr=cfg.lr)
    m = x.shape[0]
    for it in range(cfg.steps):
        state.lr = cosine_lr(cfg.lr, it, cfg.steps)
        idx = rng.integers(0, m, size=cfg.batch_size)
        out = dc.mlp_forward(params, x[idx])
        err = out - target[idx]
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise TrainingError(f"dynamics loss diverged at step {it}")
        grads, _ = dc.mlp_backward(params, x[idx], 2.0 * err / err.size)
        dc.adam_step_inplace(state, params, grads)
        if it % cfg.log_every == 0 or it == cfg.steps - 1:
            model.loss_log.append((it, loss))
    model.residual_mse = float(np.mean((dc.mlp_forward(params, x) - target) ** 2))
    model.heldout_mse = one_step_mse(model, test_eps) if test_eps else model.residual_mse
    return model


# -- consistency energy -------------------------------------------------------

def _split_traj(model: DynamicsModel, traj: np.ndarray):
    t = np.asarray(traj, dtype=np.float64)
    if t.shape[-1] != model.obs_dim + model.act_dim:
        raise dc.ShapeError(f"trajectory rows must have {model.obs_dim + model.act_dim} entries")
    return t, t[..., :model.act_dim], t[..., model.act_dim:]


def dyn_residuals(model: DynamicsModel, traj) -> np.ndarray:
    t, a, s = _split_traj(model, traj)
    lead = t.shape[:-2]
    h = t.shape[-2]
    s_cur = s[..., :-1, :].reshape(-1, model.obs_dim)
    a_cur = a[..., :-1, :].reshape(-1, model.act_dim)
    pred = model.predict(s_cur, a_cur).reshape(*lead, h - 1, model.obs_dim)
    return s[..., 1:, :] - pred


def dyn_energy(model: DynamicsModel, traj) -> np.ndarray | float:
    """Sum over transitions of ``|s_{t+1} - T(s_t, a_t)|^2`` (normalised units).

    ``traj`` is ``H x D`` or ``B x H x D``; batched input gives one energy per
    trajectory.
    """
    r = dyn_residuals(model, traj)
    e = np.sum(r * r, axis=(-2, -1))
    return float(e) if np.ndim(e) == 0 else e


def dyn_energy_grad(model: DynamicsModel, traj) -> np.ndarray:
    """Gradient of :func:`dyn_energy` with respect to every trajectory entry."""
    t, a, s = _split_traj(model, traj)
    lead = t.shape[:-2]
    h = t.shape[-2]
    ad, od = model.act_dim, model.obs_dim
    s_cur = s[..., :-1, :].reshape(-1, od)
    a_cur = a[..., :-1, :].reshape(-1, ad)
    x = np.concatenate([s_cur, a_cur], axis=1)
    r = (s[..., 1:, :].reshape(-1, od) - s_cur - dc.mlp_forward(model.params, x))
    up = -2.0 * r
    _, gx = dc.mlp_backward(model.params, x, up)
    g = np.zeros(t.shape)
    g_s_cur = (gx[:, :od] + up).reshape(*lead, h - 1, od)
    g_a_cur = gx[:, od:].reshape(*lead, h - 1, ad)
    g[..., :-1, ad:] += g_s_cur
    g[..., :-1, :ad] += g_a_cur
    g[..., 1:, ad:] += (2.0 * r).reshape(*lead, h - 1, od)
    return g
