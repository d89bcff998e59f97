"""DSL versions of the built-in energy terms."""
from __future__ import annotations

from .. import envs as E
from .syntax import Program, parse


def builtin_source(name: str, spec: E.EnvSpec, soft: bool = True, phase: str = "both",
                   weight: float = 1.0) -> str:
    """Source of the DSL program equal to a built-in term (gamma = 1)."""
    head = name + (f" ({phase})" if phase != "both" else "") + (f" @ {weight!r}" if weight != 1.0 else "")
    if name == "align":
        if spec.contact_pair is None:
            raise ValueError(f"{spec.env_id} has no contact point")
        h, c = spec.contact_pair
        return f"{head}: mean_t(norm2(obs[t, {h}] - obs[t, {c}]))\n"
    if name == "goal":
        parts = []
        for k, i in enumerate(spec.goal_idx):
            if soft and spec.angular_goal:
                d = f"obs[t, {i}] - obs[0, {i}] - t / H * wrap(goal[{k}] - obs[0, {i}])"
            elif soft:
                d = f"obs[t, {i}] - interp(obs[0, {i}], goal[{k}], t / H)"
            else:
                d = f"obs[-1, {i}] - goal[{k}]"
            if spec.angular_goal:
                d = f"wrap({d})"
            parts.append(f"norm2({d})")
        inner = " + ".join(parts)
        return f"{head}: {'mean_t(' + inner + ')' if soft else inner}\n"
    if name == "dyn":
        return f"{head}: sum_t(norm2(nobs[t+1, 0:{spec.obs_dim}] - dyn(t)))\n"
    if name == "activity":
        lo, hi = min(spec.actuator_idx), max(spec.actuator_idx) + 1
        if list(spec.actuator_idx) != list(range(lo, hi)):
            raise ValueError("actuator indices must be contiguous")
        return (f"{head}: mean_t(softplus((0.01 - mean(abs(obs[t+1, {lo}:{hi}] - obs[t, {lo}:{hi}])))"
                f" / 0.0025))\n")
    raise ValueError(f"no DSL version of term {name!r}")


def builtin_program(names, spec: E.EnvSpec, soft: bool = True) -> Program:
    """Parse the DSL versions of several built-in terms into one program."""
    if isinstance(names, str):
        names = [names]
    return parse("".join(builtin_source(n, spec, soft) for n in names))
