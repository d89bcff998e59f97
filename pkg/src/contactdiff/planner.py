"""Guided reverse diffusion over trajectories and the receding-horizon loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import envs as E
from . import guidance as G
from .data import DemoSet, Normalizer, episode_goal, window_dataset
from .denoiser import DenoiserModel, UnsupportedMode, cf_compose, predict_x0
from .schedule import NoiseSchedule, posterior_step

log = logging.getLogger(__name__)

MODES = ("full", "no_guide", "naive_guide", "inpaint", "cfree")


class PlanningError(RuntimeError):
    pass


@dataclass
class PlanConfig:
    mode: str = "full"
    goal: tuple = ()
    k: int = 8
    alpha: float = 1000.0
    omega: float = 1.0
    seed: int = 0
    guide: G.GuidanceConfig = field(default_factory=G.GuidanceConfig)
    # where guidance energies are evaluated: the clean estimate or the posterior mean
    guide_on: str = "x0"
    # cap on each entry's guidance shift, in units of the step's noise std
    # (None disables)
    shift_clip: float | None = 1.0
    # "scale" shrinks the whole shift uniformly, "entry" clips each entry
    clip_mode: str = "scale"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.guide_on not in ("x0", "mu"):
            raise ValueError("guide_on must be 'x0' or 'mu'")
        if self.clip_mode not in ("scale", "entry"):
            raise ValueError("clip_mode must be 'scale' or 'entry'")


# Guidance settings per env. Energies are in env units, so the goal weight
# absorbs the scale of the goal dims (nail depth spans 0.09 m).
PRESETS = {
    "door1d": {"alpha": 30.0, "shift_clip": 10.0,
               "weights": {"goal": 30.0, "align": 12.0, "activity": 12.0, "dyn": 20.0}},
    "hammer1d": {"alpha": 100.0, "shift_clip": 10.0,
                 "weights": {"goal": 30000.0, "align": 12.0, "activity": 12.0, "dyn": 20.0}},
    "disk": {"alpha": 100.0, "shift_clip": 10.0,
             "weights": {"goal": 300.0, "align": 12.0, "activity": 12.0, "dyn": 20.0}},
}


def preset_config(env_id: str, mode: str, goal, guide: G.GuidanceConfig | None = None,
                  **overrides) -> PlanConfig:
    """:class:`PlanConfig` with the tuned settings for ``env_id``.

    ``guide`` replaces the preset guidance config wholesale; keyword overrides
    apply to the plan config itself.
    """
    if env_id not in PRESETS:
        raise ValueError(f"no preset for env {env_id!r}")
    p = PRESETS[env_id]
    if guide is None:
        guide = G.GuidanceConfig(alpha=p["alpha"], weights=dict(p["weights"]))
    kw = {"alpha": p["alpha"], "shift_clip": p["shift_clip"]}
    kw.update(overrides)
    return PlanConfig(mode=mode, goal=tuple(np.atleast_1d(goal)), guide=guide, **kw)


# -- conditioning helpers --------------------------------------------------------

def inpaint_start(model: DenoiserModel, traj_n: np.ndarray, s0_n: np.ndarray) -> np.ndarray:
    """Overwrite the step-0 state columns (in place) with the observed state."""
    traj_n[..., 0, model.act_dim:] = s0_n
    return traj_n


def inpaint_end(model: DenoiserModel, traj_n: np.ndarray, cols, values_n) -> np.ndarray:
    traj_n[..., -1, cols] = values_n
    return traj_n


def goal_conditions(demos: DemoSet, horizon: int):
    """Windows plus the classifier-free condition of each window.

    The condition is the achieved episode goal minus the goal-dim value at
    the window's first state.
    """
    spec = demos.spec
    wins, idx = window_dataset(demos, horizon, with_index=True)
    gcols = [spec.act_dim + i for i in spec.goal_idx]
    conds = np.array([episode_goal(spec, demos.episodes[e]) - wins[j, 0, gcols]
                      for j, (e, _) in enumerate(idx)])
    return wins, conds


def cfree_condition(spec: E.EnvSpec, state, goal) -> np.ndarray:
    return spec.goal_vector(goal) - np.asarray(state)[list(spec.goal_idx)]


# -- samplers --------------------------------------------------------------------

def _check_s0(model: DenoiserModel, s0) -> np.ndarray:
    s0 = np.asarray(s0, dtype=np.float64)
    if s0.shape != (model.obs_dim,):
        raise ValueError(f"start state must have {model.obs_dim} entries")
    return s0


def _norm(model: DenoiserModel) -> Normalizer:
    if model.normalizer is None:
        raise ValueError("denoiser has no normaliser attached")
    return model.normalizer


def _finish(model: DenoiserModel, x: np.ndarray, s0: np.ndarray) -> np.ndarray:
    out = _norm(model).unnormalize(x)
    out[..., 0, model.act_dim:] = s0
    return out


def guided_sample(model: DenoiserModel, sched: NoiseSchedule, terms, cfg: PlanConfig, s0,
                  rng: np.random.Generator, spec: E.EnvSpec | None = None, n: int | None = None,
                  predictor=None) -> np.ndarray:
    """Reverse diffusion with projections, start-state inpainting and guidance.

    Returns the trajectory in environment units (``H x D``, or ``n x H x D``
    when ``n`` is given) with the step-0 state equal to ``s0``. ``predictor``
    replaces the plain clean-trajectory prediction (used for classifier-free
    composition).
    """
    spec = spec or E.get_env(model.env_id)
    s0 = _check_s0(model, s0)
    norm = _norm(model)
    s0_n = norm.normalize_obs(s0)
    predictor = predictor or (lambda x, i: predict_x0(model, x, i))
    shape = (model.horizon, model.row_dim) if n is None else (n, model.horizon, model.row_dim)
    x = inpaint_start(model, rng.standard_normal(shape), s0_n)
    projections = [t for t in terms if t.projection is not None]
    gc = cfg.guide
    for i in range(sched.n_steps, 0, -1):
        x0 = inpaint_start(model, predictor(x, i), s0_n)
        batch = x0.reshape(-1, model.horizon, model.row_dim)
        grads = np.zeros_like(batch)
        for b in range(batch.shape[0]):
            tau_e = norm.unnormalize(batch[b])
            phase = (G.phase_blend(spec, tau_e, gc.delta1) if gc.blend
                     else G.select_phase(spec, tau_e, gc.delta1))
            if projections:
                p = tau_e
                for t in projections:
                    if _active(t, phase):
                        p = t.projection(p)
                if p is not tau_e:
                    batch[b] = norm.normalize(p)
                    batch[b, 0, model.act_dim:] = s0_n
            if cfg.alpha > 0 and terms:
                point = batch[b]
                if cfg.guide_on == "mu":
                    xb = x.reshape(batch.shape)[b]
                    point = sched.coef_x0[i] * batch[b] + sched.coef_xt[i] * xb
                grads[b] = G.compose_gradient(terms, point, phase, gc)
        x0 = batch.reshape(shape)
        g = grads.reshape(shape) if cfg.alpha > 0 and terms else None
        if g is not None and cfg.shift_clip is not None:
            if not np.all(np.isfinite(g)):
                raise G.GuidanceDivergence("composite")
            cap = cfg.shift_clip / (cfg.alpha * np.sqrt(sched.post_var[i]))
            if cfg.clip_mode == "entry":
                g = np.clip(g, -cap, cap)
            else:
                # shrink the whole shift so its largest entry is at most the
                # cap, keeping the direction of the composed gradient
                peak = np.max(np.abs(g))
                if peak > cap:
                    g = g * (cap / peak)
        x = posterior_step(sched, x0, x, i, cfg.alpha, g, rng)
        inpaint_start(model, x, s0_n)
    return _finish(model, x, s0)


def _active(term: G.EnergyTerm, phase) -> bool:
    if isinstance(phase, str):
        return term.active(phase)
    return term.phase == "both" or (term.phase == "post" and phase > 0) or (term.phase == "pre" and phase < 1)


def inpaint_goal_sample(model: DenoiserModel, sched: NoiseSchedule, s0, goal,
                        rng: np.random.Generator, spec: E.EnvSpec | None = None) -> np.ndarray:
    """Unguided sampling with the object goal written into the final step."""
    spec = spec or E.get_env(model.env_id)
    s0 = _check_s0(model, s0)
    norm = _norm(model)
    s0_n = norm.normalize_obs(s0)
    cols = [model.act_dim + i for i in spec.goal_idx]
    g_n = (spec.goal_vector(goal) - norm.obs_offset[list(spec.goal_idx)]) / norm.obs_scale[list(spec.goal_idx)]
    x = inpaint_end(model, inpaint_start(model, rng.standard_normal((model.horizon, model.row_dim)), s0_n),
                    cols, g_n)
    for i in range(sched.n_steps, 0, -1):
        x0 = inpaint_end(model, inpaint_start(model, predict_x0(model, x, i), s0_n), cols, g_n)
        x = posterior_step(sched, x0, x, i, 0.0, None, rng)
        inpaint_end(model, inpaint_start(model, x, s0_n), cols, g_n)
    out = _finish(model, x, s0)
    out[-1, cols] = spec.goal_vector(goal)
    return out


def cfree_sample(model: DenoiserModel, sched: NoiseSchedule, s0, goal, omega: float,
                 rng: np.random.Generator, spec: E.EnvSpec | None = None) -> np.ndarray:
    """Classifier-free composition conditioned on the remaining goal offset."""
    spec = spec or E.get_env(model.env_id)
    if model.cond_dim == 0:
        raise UnsupportedMode("cfree mode needs a conditional denoiser")
    cond = cfree_condition(spec, s0, goal)
    cfg = PlanConfig(mode="cfree", alpha=0.0)
    return guided_sample(model, sched, [], cfg, s0, rng, spec,
                         predictor=lambda x, i: cf_compose(model, x, i, cond, omega))


# -- planners --------------------------------------------------------------------

class DiffusionPlanner:
    """Plans one trajectory per call in the configured mode."""

    def __init__(self, spec: E.EnvSpec, model: DenoiserModel, cfg: PlanConfig,
                 dyn_model=None, cond_model: DenoiserModel | None = None, terms=None):
        """``terms`` (e.g. from a guidance program) replace the built-in recipe
        in the guided modes; the penalty projection is kept in full mode."""
        self.spec = spec
        self.cfg = cfg
        self.goal = spec.validate_goal(cfg.goal)
        self.dyn_model = dyn_model
        if cfg.mode == "cfree":
            if cond_model is None or cond_model.cond_dim == 0:
                raise UnsupportedMode("cfree mode needs a conditional denoiser")
            model = cond_model
        self.model = model
        self.sched = model.schedule()
        if model.env_id and model.env_id != spec.env_id:
            raise ValueError(f"model trained for {model.env_id!r}, not {spec.env_id!r}")
        self.terms = []
        if cfg.mode in ("full", "naive_guide") and terms is not None:
            self.terms = list(terms)
            if cfg.mode == "full":
                self.terms += [t for t in G.recipe_terms(spec, self.goal, cfg.guide, "full",
                                                         model.normalizer) if t.projection]
        elif cfg.mode in ("full", "naive_guide"):
            if cfg.mode == "full" and dyn_model is None:
                raise ValueError("full mode needs a dynamics model")
            self.terms = G.recipe_terms(spec, self.goal, cfg.guide, cfg.mode, model.normalizer,
                                        dyn_model if cfg.mode == "full" else None)

    @property
    def horizon(self) -> int:
        return self.model.horizon

    def plan(self, state, rng: np.random.Generator) -> np.ndarray:
        m, c = self.cfg.mode, self.cfg
        if m == "inpaint":
            return inpaint_goal_sample(self.model, self.sched, state, self.goal, rng, self.spec)
        if m == "cfree":
            return cfree_sample(self.model, self.sched, state, self.goal, c.omega, rng, self.spec)
        cfg = c if m != "no_guide" else PlanConfig(mode="no_guide", alpha=0.0, guide=c.guide)
        return guided_sample(self.model, self.sched, self.terms, cfg, state, rng, self.spec)


class ExpertPlanner:
    """Oracle that plans by rolling the scripted expert through the simulator."""

    def __init__(self, spec: E.EnvSpec, goal, horizon: int = 32, **expert_kw):
        self.spec = spec
        self.goal = spec.validate_goal(goal)
        self.horizon = horizon
        self.kw = expert_kw

    def plan(self, state, rng=None) -> np.ndarray:
        rows = []
        s = np.asarray(state, dtype=np.float64)
        for _ in range(self.horizon):
            a = E.expert_action(self.spec, s, self.goal, **self.kw)
            rows.append(np.concatenate([a, s]))
            s = E.step(self.spec, s, a)
        return np.array(rows)


# -- receding horizon ------------------------------------------------------------

@dataclass
class EpisodeRollout:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    plans: list
    success: bool
    ghost_metric: float
    steps: int
    error: str | None = None


def receding_control(spec: E.EnvSpec, planner, goal, max_steps: int | None = None, seed: int = 0,
                     k: int = 8, std=None, start_state=None, trial: int = 0) -> EpisodeRollout:
    """Replan every ``k`` executed steps until success settles or ``max_steps``.

    ``std`` scales the ghost metric per state dimension (defaults to the
    planner model's normaliser half-range). A planner exception ends the
    episode early and is recorded in ``error``. ``seed`` fixes the start
    state and ``trial`` selects an independent planning noise stream.
    """
    max_steps = spec.episode_len if max_steps is None else max_steps
    if max_steps < planner.horizon:
        raise ValueError(f"max_steps {max_steps} is shorter than the plan horizon {planner.horizon}")
    if not 1 <= k <= planner.horizon:
        raise ValueError("k must lie in 1..H")
    goal = spec.validate_goal(goal)
    if trial < 0:
        raise ValueError("trial must be >= 0")
    rng = np.random.default_rng([seed, 1 + trial])
    s = E.reset(spec, seed) if start_state is None else np.asarray(start_state, dtype=np.float64)
    if std is None:
        model = getattr(planner, "model", None)
        std = model.normalizer.obs_scale if model is not None else np.ones(spec.obs_dim)
    S, A, N, plans, ghosts = [], [], [], [], []
    error = None
    done = False
    while len(A) < max_steps and not done:
        try:
            plan = planner.plan(s, rng)
        except Exception as exc:  # partial rollout is still returned
            error = f"{type(exc).__name__}: {exc}"
            log.warning("planning failed at step %d: %s", len(A), error)
            break
        plans.append(plan)
        acts, pred = plan[:, :spec.act_dim], plan[:, spec.act_dim:]
        ghosts.append(E.ghost_metric(spec, pred, acts, std))
        for a in acts[:k]:
            a = spec.clip_action(a)
            s2 = E.step(spec, s, a)
            S.append(s)
            A.append(a)
            N.append(s2)
            s = s2
            if _done(spec, N, goal) or len(A) >= max_steps:
                done = _done(spec, N, goal)
                break
    ok = bool(N) and E.success(spec, N, goal)
    return EpisodeRollout(np.array(S).reshape(-1, spec.obs_dim), np.array(A).reshape(-1, spec.act_dim),
                          np.array(N).reshape(-1, spec.obs_dim), plans, ok,
                          float(np.mean(ghosts)) if ghosts else float("nan"), len(A), error)


def _done(spec: E.EnvSpec, next_states, goal) -> bool:
    return E.settled(spec, next_states, goal)
