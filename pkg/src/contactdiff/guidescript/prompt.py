"""Prompt bundles describing a task and the guidance language to a model."""
from __future__ import annotations

from dataclasses import dataclass

from .. import envs as E
from . import syntax as S

PART_NAMES = ("function purpose", "guidance structure", "environment description",
              "function prototype", "task instruction", "hints")

ENV_DESCRIPTIONS = {
    "door1d": (
        "A one-dimensional door with a latch. The hand slides along x and can turn the latch\n"
        "when it touches the handle. Once the latch is turned past pi/4 rad, pulling the hand\n"
        "towards -x swings the door open; the handle moves with the door.\n"
        "obs[t, 0]: hand position p (m)\n"
        "obs[t, 1]: grip level g in [0, 1]\n"
        "obs[t, 2]: latch angle (rad), opens at pi/4\n"
        "obs[t, 3]: door hinge angle (rad), 0 = closed, at most 2*pi/3\n"
        "obs[t, 4]: handle x position (m) = 1 - 0.5 * hinge\n"
        "act[t, 0]: change of hand position per step, |dp| <= 0.05\n"
        "act[t, 1]: change of grip per step, |dg| <= 0.1; in contact it also turns the latch\n"
        "contact: |obs[t, 0] - obs[t, 4]| < 0.1"
    ),
    "hammer1d": (
        "A hand picks up a hammer and strikes a nail at x = 1.0. Each strike drives the nail by\n"
        "half the hammer's travel past the nail, up to 0.09 m.\n"
        "obs[t, 0]: hand position (m)\n"
        "obs[t, 1]: hammer head position (m), stops at the nail x = 1.0\n"
        "obs[t, 2]: nail depth (m) in [0, 0.09]\n"
        "act[t, 0]: change of hand position per step, |dp| <= 0.1\n"
        "contact: |obs[t, 0] - obs[t, 1]| < 0.1 (hammer grasped)"
    ),
    "disk": (
        "Three fingers rotate a disk in the hand. The disk turns by 2 * mean finger motion,\n"
        "but only in steps where the mean absolute finger motion exceeds 0.01.\n"
        "obs[t, 0:3]: finger positions\n"
        "obs[t, 3]: disk angle theta (rad), wrapped to (-pi, pi]\n"
        "act[t, 0:3]: finger motions per step, each |df| <= 0.1\n"
        "the fingers always touch the disk, so there is no reaching phase"
    ),
}

DEFAULT_HINTS = (
    "1. Use soft interpolation for targets, e.g. mean_t(norm2(obs[t, k] - interp(obs[0, k], goal[0], t / H))).\n"
    "   If you use soft goals, do not add another hard goal term.\n"
    "2. Scale terms with '@ weight': the goal term around 30, other terms around 12 and the\n"
    "   dynamics term around 1.2. Weights are rescaled so each term starts at its written weight.\n"
    "3. Keep every term differentiable where possible; heaviside and mask conditions give no gradient.\n"
    "4. Add a dynamics-consistency term sum_t(norm2(nobs[t+1, 0:D] - dyn(t))) after contact."
)


@dataclass(frozen=True)
class PromptBundle:
    env_id: str
    parts: tuple   # six (name, text) pairs in PART_NAMES order

    @property
    def text(self) -> str:
        return "\n\n".join(f"## {i + 1}. {name.title()}\n{body}" for i, (name, body) in enumerate(self.parts))

    def part(self, name: str) -> str:
        return dict(self.parts)[name]


def _structure(spec: E.EnvSpec) -> str:
    if spec.contact_pair is None:
        return (
            "The object is in contact from the start, so a single phase applies.\n"
            "Mark every term '(both)'. Combine a goal term, a finger-activity term that keeps the\n"
            "actuators moving (e.g. softplus((0.01 - mean(abs(obs[t+1, 0:3] - obs[t, 0:3]))) / 0.0025)),\n"
            "and a dynamics-consistency term."
        )
    h, c = spec.contact_pair
    return (
        "The guidance has two phases, switched by the distance between the hand and the\n"
        f"contact point at the first planned step (obs[0, {h}] vs obs[0, {c}], threshold 0.1).\n"
        "Phase 1 (Pre-Interaction Phase): guide the hand towards the contact point.\n"
        "Mark these terms '(pre)'.\n"
        "Phase 2 (Post-Interaction Phase): guide the object towards the goal while keeping\n"
        "the plan physically consistent. Mark these terms '(post)'."
    )


PROTOTYPE = (
    "Write a guidance program: one named term per line, each a scalar energy to minimise.\n"
    "    name (phase) @ weight: expression\n"
    "Trajectories are in environment units; obs[t, i] and act[t, i] index the plan at step t,\n"
    "nobs[t, i] is the normalised observation, goal[k] the task goal and H the horizon.\n"
    "Functions: " + ", ".join(sorted(S.FUNCTIONS)) + ".\n"
    "mean_t/sum_t reduce over the steps t where every t+k reference is inside the horizon;\n"
    "dyn(t) is the learned model's normalised prediction of nobs[t+1, :].\n"
    "Return only the program, optionally inside a ``` block.\n"
    "Grammar:\n" + S.__doc__.split("Grammar (EBNF)::", 1)[1].strip("\n")
)


def render_prompt(env_id: str, task_instruction: str, hints: str | None = None) -> PromptBundle:
    """Deterministic six-part prompt for an environment and task."""
    spec = E.get_env(env_id)
    if not task_instruction or not task_instruction.strip():
        raise ValueError("task instruction must not be empty")
    purpose = (
        "You write guidance energies for a diffusion planner that samples joint state-action\n"
        f"trajectories for the '{env_id}' environment. Lower energy marks better plans; the\n"
        "planner follows the negative gradient of the weighted sum of your terms."
    )
    parts = (
        (PART_NAMES[0], purpose),
        (PART_NAMES[1], _structure(spec)),
        (PART_NAMES[2], ENV_DESCRIPTIONS[env_id]),
        (PART_NAMES[3], PROTOTYPE),
        (PART_NAMES[4], task_instruction.strip()),
        (PART_NAMES[5], (hints or DEFAULT_HINTS).strip()),
    )
    return PromptBundle(env_id, parts)
