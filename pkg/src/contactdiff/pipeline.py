"""Training all models for an env from one demo set, and their checkpoint folder."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import denoiser as Dn
from . import dynmodel as M
from .data import DemoSet, fit_normalizer
from .evalharness import MissingModel, ModelBundle
from .planner import goal_conditions

DENOISER_FILE = "denoiser.cdm"
COND_FILE = "cond.cdm"
DYN_FILE = "dynamics.cdm"


@dataclass
class PipelineConfig:
    horizon: int = 32
    n_steps: int = 20
    steps: int = 12000
    dyn_steps: int = 6000
    seed: int = 0
    # also train the goal-conditioned denoiser used by the cfree mode
    cond: bool = True


def train_models(demos: DemoSet, cfg: PipelineConfig | None = None, log=None) -> ModelBundle:
    """Fit the normaliser, then the denoiser, optional conditional denoiser and dynamics."""
    cfg = cfg or PipelineConfig()
    spec = demos.spec
    norm = fit_normalizer(demos)
    wins, conds = goal_conditions(demos, cfg.horizon)
    wn = norm.normalize(wins)
    tc = Dn.TrainConfig(steps=cfg.steps, n_steps=cfg.n_steps, seed=cfg.seed)
    say = log or (lambda msg: None)
    say(f"training denoiser on {len(wn)} windows ({cfg.steps} steps)")
    den = Dn.train(wn, tc, obs_dim=spec.obs_dim, normalizer=norm, env_id=spec.env_id)
    cond = None
    if cfg.cond:
        say("training conditional denoiser")
        cond = Dn.train(wn, tc, conds=conds, obs_dim=spec.obs_dim, normalizer=norm,
                        env_id=spec.env_id)
    say("training dynamics model")
    dyn = M.train_dynamics(demos, M.DynTrainConfig(steps=cfg.dyn_steps, seed=cfg.seed),
                           normalizer=norm)
    return ModelBundle(den, cond, dyn)


def save_models(bundle: ModelBundle, folder) -> dict:
    os.makedirs(folder, exist_ok=True)
    paths = {}
    for name, model in ((DENOISER_FILE, bundle.denoiser), (COND_FILE, bundle.cond),
                        (DYN_FILE, bundle.dyn)):
        if model is not None:
            p = os.path.join(folder, name)
            model.save(p)
            paths[name] = p
    return paths


def load_models(folder) -> ModelBundle:
    """Load whichever checkpoints exist; the denoiser is required."""
    p = os.path.join(folder, DENOISER_FILE)
    if not os.path.exists(p):
        raise MissingModel(f"no denoiser checkpoint at {p}")
    den = Dn.DenoiserModel.load(p)
    cp = os.path.join(folder, COND_FILE)
    dp = os.path.join(folder, DYN_FILE)
    cond = Dn.DenoiserModel.load(cp) if os.path.exists(cp) else None
    dyn = M.DynamicsModel.load(dp) if os.path.exists(dp) else None
    return ModelBundle(den, cond, dyn)


def loss_rows(bundle: ModelBundle):
    """``(model, step, loss)`` rows of every training log, for a CSV."""
    rows = []
    for name, model in (("denoiser", bundle.denoiser), ("cond", bundle.cond),
                        ("dynamics", bundle.dyn)):
        if model is None:
            continue
        for step, loss in model.loss_log:
            rows.append((name, int(step), float(loss)))
    if not all(np.isfinite(r[2]) for r in rows):
        raise Dn.TrainingError("non-finite loss in training log")
    return rows
