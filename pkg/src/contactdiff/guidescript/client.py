"""Model clients and the generate-check-repair loop."""
from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .. import envs as E
from . import syntax as S
from .evaluator import EvalContext, EvalError, eval_grad
from .prompt import PromptBundle

ENV_URL = "CONTACTDIFF_LLM_URL"
ENV_MODEL = "CONTACTDIFF_LLM_MODEL"
ENV_KEY = "CONTACTDIFF_LLM_KEY"

SYSTEM_PROMPT = ("You are an expert in robotics, diffusion planning and program synthesis. "
                 "You write guidance programs in the small language described by the user.")


class TransportError(RuntimeError):
    pass


class ExhaustionError(RuntimeError):
    """Every round produced an invalid program."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__(f"no valid program after {len(diagnostics)} round(s); last: {diagnostics[-1]}")


class FixtureClient:
    """Replays recorded responses in order (one per round)."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    @classmethod
    def from_file(cls, path) -> "FixtureClient":
        with open(path, encoding="utf-8") as f:
            text = f.read()
        return cls(split_fixture(text))

    def complete(self, messages: list[dict]) -> str:
        if self.calls >= len(self.responses):
            raise TransportError("fixture has no more responses")
        r = self.responses[self.calls]
        self.calls += 1
        return r


def split_fixture(text: str) -> list[str]:
    """Responses are separated by lines holding only ``---``."""
    parts = re.split(r"^---[ \t]*$", text, flags=re.MULTILINE)
    return [p.strip("\n") for p in parts if p.strip()]


class HttpClient:
    """Chat-completion endpoint over HTTPS (JSON in, ``choices[0].message.content`` out)."""

    def __init__(self, url: str, model: str, api_key: str = "", timeout: float = 60.0):
        if not url:
            raise ValueError("endpoint URL is required")
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    @classmethod
    def from_env(cls) -> "HttpClient":
        url = os.environ.get(ENV_URL, "")
        if not url:
            raise ValueError(f"set {ENV_URL} (and {ENV_MODEL}, {ENV_KEY}) or use a fixture file")
        return cls(url, os.environ.get(ENV_MODEL, ""), os.environ.get(ENV_KEY, ""))

    def complete(self, messages: list[dict]) -> str:
        body = json.dumps({"model": self.model, "messages": messages, "temperature": 0}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise TransportError(f"request to {self.url} failed: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("malformed completion response") from exc


def extract_program_text(response: str) -> str:
    m = re.search(r"```[a-zA-Z]*\n(.*?)```", response, flags=re.DOTALL)
    return m.group(1) if m else response


def probe_trajectory(spec: E.EnvSpec, horizon: int = 32, seed: int = 0) -> np.ndarray:
    """A random in-bounds trajectory used to trial-run candidate programs."""
    rng = np.random.default_rng(seed)
    acts = rng.uniform(-spec.action_bounds, spec.action_bounds, size=(horizon, spec.act_dim))
    obs = rng.uniform(spec.state_low, spec.state_high, size=(horizon, spec.obs_dim))
    return np.concatenate([acts, obs], axis=1)


def validate(text: str, spec: E.EnvSpec, goal, normalizer=None, dyn_model=None) -> S.Program:
    """Parse, statically check and trial-evaluate a candidate program."""
    prog = S.check(S.parse(text), spec.obs_dim, spec.act_dim, len(spec.goal_idx))
    ctx = EvalContext.for_env(spec, goal, normalizer, dyn_model)
    g = eval_grad(prog, probe_trajectory(spec), ctx)
    if not np.all(np.isfinite(g)):
        raise EvalError("program produced a non-finite gradient on the probe trajectory", 1, 1)
    return prog


@dataclass
class GenerationResult:
    program: S.Program
    rounds: int
    diagnostics: list = field(default_factory=list)
    messages: list = field(default_factory=list)


def generate_guidance(bundle: PromptBundle, client, max_rounds: int = 3, goal=None,
                      normalizer=None, dyn_model=None) -> GenerationResult:
    """Query, check and repair until a valid program appears.

    Each failing candidate's diagnostic goes back to the model as the next
    user turn. Raises :class:`ExhaustionError` after ``max_rounds`` failures.
    Transport failures propagate as :class:`TransportError`.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    spec = E.get_env(bundle.env_id)
    goal = spec.train_goal if goal is None else goal
    messages = [{"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": bundle.text}]
    diagnostics = []
    for rnd in range(1, max_rounds + 1):
        response = client.complete(list(messages))
        messages.append({"role": "assistant", "content": response})
        try:
            prog = validate(extract_program_text(response), spec, goal, normalizer, dyn_model)
        except S.GuideScriptError as exc:
            diagnostics.append(exc.describe())
            messages.append({"role": "user", "content":
                             f"The program was rejected.\n{exc.describe()}\nReturn a corrected program."})
            continue
        return GenerationResult(prog, rnd, diagnostics, messages)
    raise ExhaustionError(diagnostics)
