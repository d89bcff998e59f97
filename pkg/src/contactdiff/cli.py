"""Command-line entry point.

Every command reads an optional ``key = value`` config file (``--config``)
and lets flags override single keys. All outputs go under ``--out`` together
with ``manifest.json``, which records the resolved config and the SHA-256 of
every input and output file.

Exit codes: 0 success, 2 usage or config error, 3 runtime failure (training,
planning, generation), 4 LLM transport failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import envs as E
from . import evalharness as H
from . import guidance as G
from . import pipeline as PL
from . import planner as P
from . import guidescript as GS
from .denoiser import TrainingError, UnsupportedMode
from .schedule import GuidanceDivergence

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_EXTERNAL = 0, 2, 3, 4

log = logging.getLogger("contactdiff")


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _words(v: str) -> tuple:
    return tuple(x.strip() for x in str(v).split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    name: str
    kind: object
    default: object
    help: str
    commands: tuple


ALL = ("gen-demos", "train", "plan", "eval", "guidance-gen", "report")
PLANNING = ("plan", "eval")

KEYS = [
    Key("env", str, "door1d", "environment id: door1d | hammer1d | disk", ALL[:5]),
    Key("out", str, "out", "output directory", ALL),
    Key("episodes", int, 50, "number of demonstration episodes", ("gen-demos",)),
    Key("demo_seed", int, 0, "seed of the demonstration run", ("gen-demos",)),
    Key("demos", str, "", "demo file (default: <out>/demos.cdd)", ("train",)),
    Key("horizon", int, 32, "plan horizon H", ("train",)),
    Key("n_steps", int, 20, "diffusion steps N", ("train",)),
    Key("train_steps", int, 12000, "denoiser training iterations", ("train",)),
    Key("dyn_steps", int, 6000, "dynamics model training iterations", ("train",)),
    Key("cond", _bool, True, "also train the conditional denoiser", ("train",)),
    Key("seed", int, 0, "training seed, or episode seed for plan", ("train", "plan")),
    Key("models", str, "", "checkpoint directory (default: <out>)", PLANNING),
    Key("mode", str, "full", "full | no_guide | naive_guide | inpaint | cfree", ("plan",)),
    Key("modes", _words, ("full", "inpaint", "cfree"), "comma-separated modes", ("eval",)),
    Key("goal", _floats, (), "goal vector (comma-separated); default: env training goal",
        ("plan", "guidance-gen")),
    Key("goals", _floats, (), "comma-separated goals; 'door-suite' via --suite",
        ("eval",)),
    Key("suite", _bool, False, "use the door suite goals", ("eval",)),
    Key("seeds", int, 10, "seeds per goal and mode", ("eval",)),
    Key("tries", int, 3, "tries per seed", ("eval",)),
    Key("workers", int, 1, "worker processes", ("eval",)),
    Key("k", int, 8, "executed steps per replan", PLANNING),
    Key("max_steps", int, 0, "episode step limit (0: env default)", PLANNING),
    Key("alpha", float, None, "guidance scale (default: env preset)", PLANNING),
    Key("omega", float, 1.0, "classifier-free weight", PLANNING),
    Key("shift_clip", float, None, "guidance shift cap in noise stds (default: preset)", PLANNING),
    Key("delta1", float, 0.1, "phase switch distance", PLANNING),
    Key("delta2", float, 0.15, "per-step object change cap", PLANNING),
    Key("delta3", float, 0.01, "actuator activity floor", PLANNING),
    Key("gamma", float, 1.0, "discount of guidance energies", PLANNING),
    Key("soft_goal", _bool, True, "soft (interpolated) goal energy", PLANNING),
    Key("w_goal", float, None, "goal term weight (default: preset)", PLANNING),
    Key("w_align", float, None, "alignment term weight", PLANNING),
    Key("w_activity", float, None, "finger-activity term weight", PLANNING),
    Key("w_dyn", float, None, "dynamics term weight", PLANNING),
    Key("program", str, "", "guidance program file replacing the built-in terms", PLANNING),
    Key("instruction", str, "", "task instruction for the guidance prompt", ("guidance-gen",)),
    Key("fixture", str, "", "file of recorded model responses separated by '---' lines",
        ("guidance-gen",)),
    Key("llm_url", str, "", "chat-completion endpoint (key via CONTACTDIFF_LLM_KEY)",
        ("guidance-gen",)),
    Key("llm_model", str, "", "model name sent to the endpoint", ("guidance-gen",)),
    Key("max_rounds", int, 3, "generation rounds before giving up", ("guidance-gen",)),
    Key("table", str, "", "results CSV to render (default: <out>/results.csv)", ("report",)),
    Key("format", str, "markdown", "markdown | csv", ("report",)),
]
KEY_MAP = {k.name: k for k in KEYS}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = (x.strip() for x in line.split("=", 1))
            if key not in KEY_MAP:
                raise ConfigError(f"{path}:{n}: unknown key {key!r}")
            out[key] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags; values converted and validated."""
    raw = read_config(args.config) if args.config else {}
    cfg = {}
    for k in KEYS:
        if command not in k.commands:
            continue
        v = getattr(args, k.name, None)
        if v is None and k.name in raw:
            v = raw[k.name]
        if v is None:
            cfg[k.name] = k.default
            continue
        try:
            cfg[k.name] = k.kind(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k.name}: {exc}") from exc
    if "env" in cfg:
        try:
            spec = E.get_env(cfg["env"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("goal", "goals"):
            if key in cfg and cfg[key]:
                goals = cfg[key] if key == "goals" else [cfg[key]]
                for g in goals:
                    try:
                        spec.validate_goal(g)
                    except ValueError as exc:
                        raise ConfigError(str(exc)) from exc
    if "mode" in cfg and cfg["mode"] not in P.MODES:
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    for m in cfg.get("modes", ()):
        if m not in H.HARNESS_MODES:
            raise ConfigError(f"unknown mode {m!r}")
    if cfg.get("format", "markdown") not in ("markdown", "csv"):
        raise ConfigError("format must be markdown or csv")
    return cfg


# -- manifest ---------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(paths) -> dict:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in sorted(os.walk(p)):
                for name in sorted(files):
                    fp = os.path.join(root, name)
                    out[fp] = sha256(fp)
        elif p and os.path.exists(p):
            out[p] = sha256(p)
    return out


def write_manifest(out: str, command: str, cfg: dict, inputs, outputs) -> str:
    rel = lambda d: {os.path.relpath(k, out) if k.startswith(out) else k: v
                     for k, v in sorted(d.items())}
    man = {"command": command,
           "config": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())},
           "inputs": rel(_hash_tree(inputs)),
           "outputs": rel(_hash_tree(outputs))}
    path = os.path.join(out, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(man, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# -- commands ---------------------------------------------------------------

def _need_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def cmd_gen_demos(cfg: dict) -> int:
    spec = E.get_env(cfg["env"])
    if cfg["episodes"] < 1:
        raise ConfigError("episodes must be >= 1")
    demos = D.collect_demos(spec, cfg["episodes"], seed=cfg["demo_seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "demos.cdd")
    D.save_demos(path, demos)
    stats = D.compute_stats(demos.episodes)
    lengths = [len(e) for e in demos.episodes]
    print(f"wrote {len(demos.episodes)} {spec.env_id} episodes to {path} "
          f"({sum(lengths)} transitions)")
    for key in ("obs_mean", "obs_std"):
        if key in stats:
            print(f"  {key}: {np.round(stats[key], 4).tolist()}")
    write_manifest(cfg["out"], "gen-demos", cfg, [], [path])
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    demos_path = cfg["demos"] or os.path.join(cfg["out"], "demos.cdd")
    _need_file(demos_path, "demo file")
    demos = D.load_demos(demos_path, cfg["env"])
    pc = PL.PipelineConfig(horizon=cfg["horizon"], n_steps=cfg["n_steps"],
                           steps=cfg["train_steps"], dyn_steps=cfg["dyn_steps"],
                           seed=cfg["seed"], cond=cfg["cond"])
    bundle = PL.train_models(demos, pc, log=print)
    paths = PL.save_models(bundle, cfg["out"])
    log_path = os.path.join(cfg["out"], "loss_log.csv")
    rows = PL.loss_rows(bundle)
    with open(log_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("model", "step", "loss"))
        for name, step, loss in rows:
            w.writerow((name, step, repr(loss)))
    print(f"denoiser final loss {bundle.denoiser.loss_log[-1][1]:.5f}; "
          f"dynamics held-out mse {bundle.dyn.heldout_mse:.2e}")
    write_manifest(cfg["out"], "train", cfg, [demos_path], list(paths.values()) + [log_path])
    return EXIT_OK


def guide_config(cfg: dict, env_id: str) -> G.GuidanceConfig:
    pre = P.PRESETS[env_id]
    weights = dict(pre["weights"])
    for name in ("goal", "align", "activity", "dyn"):
        if cfg.get(f"w_{name}") is not None:
            weights[name] = cfg[f"w_{name}"]
    alpha = cfg["alpha"] if cfg.get("alpha") is not None else pre["alpha"]
    return G.GuidanceConfig(alpha=alpha, delta1=cfg["delta1"], delta2=cfg["delta2"],
                            delta3=cfg["delta3"], gamma=cfg["gamma"], weights=weights,
                            soft_goal=cfg["soft_goal"])


def plan_overrides(cfg: dict) -> dict:
    kw = {"omega": cfg["omega"], "k": cfg["k"]}
    if cfg.get("alpha") is not None:
        kw["alpha"] = cfg["alpha"]
    if cfg.get("shift_clip") is not None:
        kw["shift_clip"] = cfg["shift_clip"]
    return kw


def _program_terms(cfg, spec, goal, bundle):
    if not cfg["program"]:
        return None
    with open(_need_file(cfg["program"], "program file"), encoding="utf-8") as f:
        prog = GS.parse(f.read())
    GS.check(prog, spec.obs_dim, spec.act_dim, len(spec.goal_idx))
    ctx = GS.EvalContext.for_env(spec, goal, bundle.denoiser.normalizer, bundle.dyn)
    return GS.program_terms(prog, ctx, bundle.denoiser.normalizer)


def _models_dir(cfg) -> str:
    return cfg["models"] or cfg["out"]


def cmd_plan(cfg: dict) -> int:
    spec = E.get_env(cfg["env"])
    goal = spec.validate_goal(cfg["goal"] or spec.train_goal)
    bundle = PL.load_models(_models_dir(cfg))
    bundle.require(cfg["mode"])
    pc = P.preset_config(spec.env_id, cfg["mode"], goal, guide=guide_config(cfg, spec.env_id),
                         **plan_overrides(cfg))
    terms = _program_terms(cfg, spec, goal, bundle)
    planner = P.DiffusionPlanner(spec, bundle.denoiser, pc, dyn_model=bundle.dyn,
                                 cond_model=bundle.cond, terms=terms)
    max_steps = cfg["max_steps"] or spec.episode_len
    start = H.start_state(spec, float(goal[0]), cfg["seed"])
    r = P.receding_control(spec, planner, goal, max_steps=max_steps, seed=cfg["seed"],
                           k=cfg["k"], std=bundle.denoiser.normalizer.obs_scale, start_state=start)
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "rollout.npz")
    np.savez_compressed(path, states=r.states, actions=r.actions, next_states=r.next_states,
                        plans=np.array(r.plans), success=r.success, ghost_metric=r.ghost_metric,
                        steps=r.steps, goal=goal)
    print(f"mode={pc.mode} goal={goal.tolist()} alpha={pc.alpha:g} success={r.success} "
          f"ghost={r.ghost_metric:.4f} steps={r.steps}")
    write_manifest(cfg["out"], "plan", cfg, [_models_dir(cfg), cfg["program"]], [path])
    if r.error:
        print(f"planning failed: {r.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    spec = E.get_env(cfg["env"])
    if cfg["suite"]:
        if spec.env_id != "door1d":
            raise ConfigError("the goal suite is defined for door1d only")
        goals = H.DOOR_SUITE_GOALS
    else:
        goals = cfg["goals"] or (spec.train_goal,)
    bundle = PL.load_models(_models_dir(cfg))
    overrides = plan_overrides(cfg)
    overrides["guide"] = guide_config(cfg, spec.env_id)
    factory = _ProgramFactory(cfg["program"]) if cfg["program"] else None
    es = H.ExperimentSpec(spec.env_id, tuple(goals), cfg["modes"], cfg["seeds"], cfg["tries"],
                          out=cfg["out"], k=cfg["k"], max_steps=cfg["max_steps"] or None,
                          plan=overrides, workers=cfg["workers"])
    table = H.run_experiment(es, bundle, planner_factory=factory)
    md = os.path.join(cfg["out"], "results.md")
    with open(md, "w", encoding="utf-8") as f:
        f.write(H.report(table, "markdown"))
    print(H.report(table, "markdown"), end="")
    write_manifest(cfg["out"], "eval", cfg, [_models_dir(cfg), cfg["program"]],
                   [os.path.join(cfg["out"], "results.csv"), md,
                    os.path.join(cfg["out"], "episodes")])
    return EXIT_OK


class _ProgramFactory:
    """Planner factory that guides with a program file (picklable for workers)."""

    def __init__(self, path: str):
        with open(_need_file(path, "program file"), encoding="utf-8") as f:
            self.source = f.read()

    def __call__(self, spec, mode, goal, models, overrides):
        if mode == H.ORACLE:
            return H.default_planner(spec, mode, goal, models, overrides)
        prog = GS.check(GS.parse(self.source), spec.obs_dim, spec.act_dim, len(spec.goal_idx))
        ctx = GS.EvalContext.for_env(spec, (goal,), models.denoiser.normalizer, models.dyn)
        terms = GS.program_terms(prog, ctx, models.denoiser.normalizer)
        cfg = P.preset_config(spec.env_id, mode, goal, **overrides)
        return P.DiffusionPlanner(spec, models.denoiser, cfg, dyn_model=models.dyn,
                                  cond_model=models.cond, terms=terms)


def cmd_guidance_gen(cfg: dict) -> int:
    spec = E.get_env(cfg["env"])
    if not cfg["instruction"]:
        raise ConfigError("an instruction is required")
    if cfg["fixture"]:
        client = GS.FixtureClient.from_file(_need_file(cfg["fixture"], "fixture file"))
    elif cfg["llm_url"] or os.environ.get(GS.client.ENV_URL):
        url = cfg["llm_url"] or os.environ[GS.client.ENV_URL]
        model = cfg["llm_model"] or os.environ.get(GS.client.ENV_MODEL, "")
        client = GS.HttpClient(url, model, os.environ.get(GS.client.ENV_KEY, ""))
    else:
        raise ConfigError(f"set fixture, llm_url or {GS.client.ENV_URL}")
    goal = spec.validate_goal(cfg["goal"] or spec.train_goal)
    bundle = GS.render_prompt(spec.env_id, cfg["instruction"])
    result = GS.generate_guidance(bundle, client, max_rounds=cfg["max_rounds"], goal=goal)
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "program.gs")
    with open(path, "w", encoding="utf-8") as f:
        f.write(GS.to_source(result.program))
    with open(os.path.join(cfg["out"], "prompt.txt"), "w", encoding="utf-8") as f:
        f.write(bundle.text + "\n")
    print(f"valid program after {result.rounds} round(s): {path}")
    for d in result.diagnostics:
        print(f"  rejected: {d}")
    write_manifest(cfg["out"], "guidance-gen", cfg, [cfg["fixture"]],
                   [path, os.path.join(cfg["out"], "prompt.txt")])
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    src = cfg["table"] or os.path.join(cfg["out"], "results.csv")
    with open(_need_file(src, "results table"), encoding="utf-8") as f:
        table = H.ResultTable.from_csv(f.read())
    text = H.report(table, cfg["format"])
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "report." + ("md" if cfg["format"] == "markdown" else "csv"))
    if os.path.abspath(path) != os.path.abspath(src):
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    print(text, end="")
    write_manifest(cfg["out"], "report", cfg, [src], [path])
    return EXIT_OK


COMMANDS = {"gen-demos": cmd_gen_demos, "train": cmd_train, "plan": cmd_plan,
            "eval": cmd_eval, "guidance-gen": cmd_guidance_gen, "report": cmd_report}
HELP = {"gen-demos": "collect scripted demonstrations",
        "train": "train denoiser, conditional denoiser and dynamics model",
        "plan": "run one closed-loop planning episode",
        "eval": "run an experiment grid and write a results table",
        "guidance-gen": "generate a guidance program with a language model",
        "report": "render a results table as markdown or CSV"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contactdiff", description="Contact-aware guided diffusion planning toolkit.",
        epilog="Exit codes: 0 success, 2 usage/config, 3 runtime, 4 LLM transport.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in ALL:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="key = value config file")
        for k in KEYS:
            if name in k.commands:
                shown = ",".join(map(str, k.default)) if isinstance(k.default, tuple) else k.default
                suffix = f" [default: {shown}]" if shown not in ("", None) else ""
                p.add_argument("--" + k.name.replace("_", "-"), dest=k.name, default=None,
                               help=k.help + suffix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except GS.TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except (TrainingError, GuidanceDivergence, UnsupportedMode, H.MissingModel,
            D.CollectionError, GS.ExhaustionError, GS.GuideScriptError, P.PlanningError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValueError, KeyError) as exc:
        # bad values that only surface when the config is used
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
