"""Experiment driver: runs planners over goals, seeds and tries and tabulates results.

A run covers every (goal, mode, seed, try) combination. Success rates are in
percent over ``seeds * tries`` episodes and their std is the population std of
the per-try rates. Every episode's rollout is archived next to the CSV.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import envs as E
from . import planner as P
from .denoiser import DenoiserModel

ORACLE = "oracle"
HARNESS_MODES = P.MODES + (ORACLE,)
CSV_COLUMNS = ("mode", "goal", "success_rate", "std", "ghost_metric", "mean_steps")

DOOR_SUITE_GOALS = (math.pi / 6, 5 * math.pi / 18, 7 * math.pi / 18, math.pi / 2,
                    11 * math.pi / 18, 0.0)
DOOR_OPEN_HINGE = math.pi / 2
# door goals below this start from an open door (the close task)
DOOR_CLOSE_BELOW = 0.1
DOOR_START_GAP = 0.3


class MissingModel(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    env_id: str
    goals: tuple
    modes: tuple = ("full",)
    seeds: int = 10
    tries: int = 3
    train_goal: float | None = None
    out: str | None = None
    k: int = 8
    max_steps: int | None = None
    # PlanConfig overrides on top of the env preset, e.g. {"alpha": 50.0}
    plan: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        spec = E.get_env(self.env_id)
        if self.seeds < 1 or self.tries < 1:
            raise ValueError("seeds and tries must be >= 1")
        if not self.goals:
            raise ValueError("at least one goal is required")
        for g in self.goals:
            spec.validate_goal(g)
        for m in self.modes:
            if m not in HARNESS_MODES:
                raise ValueError(f"unknown mode {m!r}; choose from {HARNESS_MODES}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.goals = tuple(float(np.atleast_1d(g)[0]) for g in self.goals)
        self.modes = tuple(self.modes)


@dataclass
class ModelBundle:
    denoiser: DenoiserModel | None = None
    cond: DenoiserModel | None = None
    dyn: object | None = None

    def require(self, mode: str):
        if mode == ORACLE:
            return
        if self.denoiser is None:
            raise MissingModel(f"mode {mode!r} needs a trained denoiser checkpoint")
        if mode == "cfree" and self.cond is None:
            raise MissingModel("mode 'cfree' needs a conditional denoiser checkpoint")
        if mode == "full" and self.dyn is None:
            raise MissingModel("mode 'full' needs a dynamics checkpoint")


def door_suite(modes=("full", "inpaint", "cfree"), seeds: int = 10, tries: int = 3,
               out: str | None = None, **kw) -> ExperimentSpec:
    """Open to 30..110 degrees plus closing an open door, trained on 90 degrees."""
    return ExperimentSpec("door1d", DOOR_SUITE_GOALS, modes, seeds, tries,
                          train_goal=math.pi / 2, out=out, **kw)


def start_state(spec: E.EnvSpec, goal: float, seed: int) -> np.ndarray:
    """Reset state for an episode. Closing the door starts from an open door."""
    s = E.reset(spec, seed)
    if spec.env_id == "door1d" and goal < DOOR_CLOSE_BELOW:
        p = s[0]
        s[3] = DOOR_OPEN_HINGE
        s[4] = E.door_handle_x(DOOR_OPEN_HINGE)
        # hand 0 to 0.3 m short of the handle, as on the closed door
        s[0] = s[4] - DOOR_START_GAP + p
    return s


def default_planner(spec: E.EnvSpec, mode: str, goal: float, models: ModelBundle,
                    overrides: dict):
    if mode == ORACLE:
        return P.ExpertPlanner(spec, (goal,), horizon=models.denoiser.horizon
                               if models.denoiser is not None else 32)
    cfg = P.preset_config(spec.env_id, mode, goal, **overrides)
    return P.DiffusionPlanner(spec, models.denoiser, cfg, dyn_model=models.dyn,
                              cond_model=models.cond)


@dataclass
class EpisodeRecord:
    mode: str
    goal: float
    seed: int
    trial: int
    success: bool
    ghost_metric: float
    steps: int
    error: str | None
    rollout: P.EpisodeRollout | None = None


def _run_episode(job):
    spec_id, mode, goal, seed, trial, models, overrides, k, max_steps, factory = job
    spec = E.get_env(spec_id)
    planner = (factory or default_planner)(spec, mode, goal, models, overrides)
    std = models.denoiser.normalizer.obs_scale if models.denoiser is not None else None
    max_steps = spec.episode_len if max_steps is None else max_steps
    r = P.receding_control(spec, planner, (goal,), max_steps=max_steps, seed=seed, k=k,
                           std=std, start_state=start_state(spec, goal, seed), trial=trial)
    return EpisodeRecord(mode, goal, seed, trial, r.success, r.ghost_metric, r.steps, r.error, r)


@dataclass
class ResultRow:
    mode: str
    goal: float
    success_rate: float
    std: float
    ghost_metric: float
    mean_steps: float


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    episodes: list = field(default_factory=list)

    def row(self, mode: str, goal: float) -> ResultRow:
        for r in self.rows:
            if r.mode == mode and math.isclose(r.goal, goal, abs_tol=1e-12):
                return r
        raise KeyError((mode, goal))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.mode, repr(r.goal), repr(r.success_rate), repr(r.std),
                        repr(r.ghost_metric), repr(r.mean_steps)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValueError(f"CSV header must be {','.join(CSV_COLUMNS)}")
        rows = [ResultRow(m, float(g), float(s), float(sd), float(gh), float(st))
                for m, g, s, sd, gh, st in reader]
        return cls(rows)


def summarize(records, modes, goals, tries: int) -> list[ResultRow]:
    rows = []
    for goal in goals:
        for mode in modes:
            eps = [e for e in records if e.mode == mode and e.goal == goal]
            if not eps:
                continue
            per_try = [np.mean([e.success for e in eps if e.trial == t]) * 100.0
                       for t in range(tries)]
            ghosts = [e.ghost_metric for e in eps if np.isfinite(e.ghost_metric)]
            rows.append(ResultRow(
                mode, float(goal),
                float(np.mean([e.success for e in eps]) * 100.0),
                float(np.std(per_try)),
                float(np.mean(ghosts)) if ghosts else float("nan"),
                float(np.mean([e.steps for e in eps]))))
    return rows


def _archive(out: str, spec: ExperimentSpec, records) -> None:
    folder = os.path.join(out, "episodes")
    os.makedirs(folder, exist_ok=True)
    for e in records:
        r = e.rollout
        gi = spec.goals.index(e.goal)
        name = f"{e.mode}_g{gi}_s{e.seed}_t{e.trial}.npz"
        plans = np.array(r.plans) if r.plans else np.zeros((0, 0, 0))
        np.savez_compressed(os.path.join(folder, name), states=r.states, actions=r.actions,
                            next_states=r.next_states, plans=plans, success=r.success,
                            ghost_metric=r.ghost_metric, steps=r.steps, goal=e.goal,
                            error=r.error or "")


def run_experiment(spec: ExperimentSpec, models: ModelBundle, planner_factory=None) -> ResultTable:
    """Run every (goal, mode, seed, try) episode and reduce to a table.

    Episodes are independent. With ``spec.workers > 1`` they run in a process
    pool; results are always reduced in (goal, mode, seed, try) order, so the
    table does not depend on completion order. ``planner_factory(spec, mode,
    goal, models, overrides)`` replaces the default planner construction and
    must be picklable when workers are used.
    """
    for m in spec.modes:
        models.require(m)
    jobs = [(spec.env_id, mode, goal, seed, trial, models, spec.plan, spec.k, spec.max_steps,
             planner_factory)
            for goal in spec.goals for mode in spec.modes
            for seed in range(spec.seeds) for trial in range(spec.tries)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as ex:
            records = list(ex.map(_run_episode, jobs))
    else:
        records = [_run_episode(j) for j in jobs]
    table = ResultTable(summarize(records, spec.modes, spec.goals, spec.tries), records)
    if spec.out:
        os.makedirs(spec.out, exist_ok=True)
        with open(os.path.join(spec.out, "results.csv"), "w", encoding="utf-8", newline="") as f:
            f.write(table.to_csv())
        _archive(spec.out, spec, records)
    return table


def _fmt(x: float, nd: int = 1) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.{nd}f}"


def report(table: ResultTable, fmt: str = "csv") -> str:
    """Render a table as CSV (lossless) or markdown (one row per mode and goal)."""
    if fmt == "csv":
        return table.to_csv()
    if fmt != "markdown":
        raise ValueError("format must be 'csv' or 'markdown'")
    lines = ["| Mode | Goal (rad) | Success (%) | Ghost | Steps |",
             "|---|---|---|---|---|"]
    for r in table.rows:
        lines.append(f"| {r.mode} | {r.goal:.4f} | {_fmt(r.success_rate)} ± {_fmt(r.std)} "
                     f"| {_fmt(r.ghost_metric, 3)} | {_fmt(r.mean_steps)} |")
    return "\n".join(lines) + "\n"
