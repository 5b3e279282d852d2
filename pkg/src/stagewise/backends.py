"""Candidate generation: prompt templates and the three generator backends.

Every backend honours the same contract: ``generate`` returns exactly
``params.n`` candidates, ordered by index, with ids assigned in that order.
The mock and synthetic backends are pure functions of their inputs.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import httpx
import numpy as np

from .core import (
    Candidate,
    GeneratorBinding,
    StageContext,
    StageKind,
    SyntheticWorldParams,
    candidate_id,
    derive_seed,
)
from .exceptions import BackendUnavailable, MalformedResponse, MissingPlaceholder

log = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

STAGE_PLACEHOLDERS = {
    StageKind.FORMULATION: frozenset({"statement"}),
    StageKind.SOLUTION: frozenset({"statement", "formulation", "error_info"}),
}
FIVE_ELEMENTS = ("sets", "parameters", "variables", "objective", "constraints")

HTTP_ATTEMPTS = 3
HTTP_BACKOFF = 0.5  # seconds, doubled after each failed attempt


@dataclass(frozen=True)
class PromptTemplate:
    stage: StageKind
    template: str

    def __post_init__(self):
        object.__setattr__(self, "stage", StageKind(self.stage))
        unknown = self.placeholders - STAGE_PLACEHOLDERS[self.stage]
        if unknown:
            raise ValueError(f"{self.stage.value} template uses unknown placeholders {sorted(unknown)}")
        if self.stage is StageKind.FORMULATION:
            lowered = self.template.lower()
            missing = [e for e in FIVE_ELEMENTS if e not in lowered]
            if missing:
                raise ValueError(f"formulation template does not ask for: {', '.join(missing)}")

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.template))

    @classmethod
    def from_file(cls, stage, path) -> "PromptTemplate":
        return cls(stage, Path(path).read_text(encoding="utf-8"))


def builtin_template(name: str) -> PromptTemplate:
    """Load one of the bundled templates: formulation, solution or debug."""
    stage = StageKind.FORMULATION if name == "formulation" else StageKind.SOLUTION
    text = resources.files("stagewise").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(stage, text)


def render_prompt(tmpl: PromptTemplate, ctx: StageContext | dict) -> str:
    """Substitute ``{name}`` placeholders from ``ctx``.

    Braces that do not form a placeholder name are left alone, so templates
    may contain literal code.
    """
    values = ctx.fields() if isinstance(ctx, StageContext) else dict(ctx)
    for name in sorted(tmpl.placeholders):
        if name not in values:
            raise MissingPlaceholder(name)
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], tmpl.template)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.3
    max_tokens: int = 1280
    n: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


# -- synthetic world --------------------------------------------------------

_FILLER = (
    "item", "route", "plant", "shift", "budget", "demand", "supply", "crew",
    "truck", "depot", "batch", "order", "stock", "lane", "slot", "zone",
)

# Signal lines carry the stage's positive / negative keywords (see scoring).
_SIGNAL = {
    StageKind.FORMULATION: (
        "constraint c{j}: total {w} usage stays within capacity",
        "unclear: {w} quantity is ambiguous here",
    ),
    StageKind.SOLUTION: (
        "m.add_constraint(x['{w}{j}'] <= cap['{w}'])",
        "# TODO {w} bound missing",
    ),
}


def _synthetic_body(stage, index, quality, world, rng, parent_id):
    signal = quality
    if world.feature_noise > 0:
        signal = quality + world.feature_noise * rng.standard_normal()
    signal = min(1.0, max(0.0, signal))
    n_good = int(round(signal * world.signal_lines))
    words = rng.choice(_FILLER, size=world.signal_lines + 2)
    good, bad = _SIGNAL[stage]
    lines = []
    if stage is StageKind.FORMULATION:
        lines.append(f"## formulation {index}: {words[-1]} {words[-2]} model")
    else:
        lines.append(f"# program {index} derived from {parent_id}")
        lines.append("import math")
    for j in range(world.signal_lines):
        pattern = good if j < n_good else bad
        lines.append(pattern.format(j=j, w=words[j]))
    if stage is StageKind.SOLUTION:
        lines.append("print('Optimal value:', objective)")
    return "\n".join(lines) + "\n"


def synth_generate(
    world: SyntheticWorldParams,
    stage: StageKind,
    parent_quality: float | None,
    n: int,
    seed: int,
    *,
    problem_id: str = "synthetic",
    parent_id: str | None = None,
    debug_round: int = 0,
) -> list[Candidate]:
    """Draw ``n`` candidates with latent quality from the synthetic world.

    A formulation's latent quality is its own draw q_F. A solution's latent
    quality is its success probability q_F * q_S, where q_S is drawn from the
    solution-stage distribution. Each candidate's draws depend only on
    ``(seed, index)``, so siblings generated from different parents with the
    same seed share their q_S values.
    """
    stage = StageKind(stage)
    if n < 1:
        raise ValueError("n must be >= 1")
    if (parent_quality is None) == (stage is StageKind.SOLUTION):
        raise ValueError("parent_quality is required for, and only for, the solution stage")
    if stage is StageKind.SOLUTION and parent_id is None:
        parent_id = f"{problem_id}/F?"
    a, b = (world.f_alpha, world.f_beta) if stage is StageKind.FORMULATION else (world.s_alpha, world.s_beta)
    origin = f"debug_round_{debug_round}" if debug_round else "initial"
    out = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        q = world.fixed_quality if world.fixed_quality is not None else float(rng.beta(a, b))
        if stage is StageKind.SOLUTION:
            q = parent_quality * q
        out.append(
            Candidate(
                id=candidate_id(problem_id, stage, i, debug_round),
                stage=stage,
                body=_synthetic_body(stage, i, q, world, rng, parent_id),
                parent_id=parent_id,
                origin=origin,
                latent_quality=q,
            )
        )
    return out


# -- mock -------------------------------------------------------------------


@lru_cache(maxsize=64)
def _load_script(path: str, mtime: float) -> tuple[dict, ...]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            entries.append({"body": obj} if isinstance(obj, str) else obj)
    return tuple(entries)


def load_mock_script(path) -> tuple[dict, ...]:
    """Canned entries: a JSON string, or ``{"body", "stage"?, "match"?}`` per line."""
    path = str(path)
    return _load_script(path, os.path.getmtime(path))


def _mock_generate(binding, prompt, params, stage):
    entries = [
        e
        for e in load_mock_script(binding.script_path)
        if e.get("stage", stage.value) == stage.value and e.get("match", "") in prompt
    ]
    if not entries:
        raise MalformedResponse(f"mock script {binding.script_path} has no entry for this {stage.value} prompt")
    return [entries[i % len(entries)]["body"] for i in range(params.n)]


# -- http -------------------------------------------------------------------


def post_with_retries(url: str, payload: dict, *, headers=None, timeout: float = 60.0) -> httpx.Response:
    """POST ``payload`` as JSON, retrying transport errors, 429 and 5xx.

    Raises BackendUnavailable once the attempts are exhausted or the server
    answers with a non-retryable error status.
    """
    delay = HTTP_BACKOFF
    last_error = None
    for attempt in range(HTTP_ATTEMPTS):
        try:
            resp = httpx.post(url, json=payload, headers=headers or {}, timeout=timeout)
        except httpx.HTTPError as exc:
            last_error = f"{type(exc).__name__}: {exc}"
        else:
            if resp.status_code == 200:
                return resp
            last_error = f"HTTP {resp.status_code}"
            if resp.status_code < 500 and resp.status_code != 429:
                break
        if attempt + 1 < HTTP_ATTEMPTS:
            log.warning("%s attempt %d failed (%s); retrying", url, attempt + 1, last_error)
            time.sleep(delay)
            delay *= 2
    raise BackendUnavailable(f"{url}: {last_error}")


def _http_one(binding, prompt, params, index, exchanges):
    url = binding.endpoint.rstrip("/") + "/v1/chat/completions"
    payload = {
        "model": binding.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "seed": derive_seed(params.seed, index) % 2**31,
    }
    headers = {}
    if binding.api_key_env and os.environ.get(binding.api_key_env):
        headers["Authorization"] = f"Bearer {os.environ[binding.api_key_env]}"
    resp = post_with_retries(url, payload, headers=headers, timeout=binding.timeout)
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"{url}: no choices[0].message.content in reply") from exc
    if not isinstance(content, str):
        raise MalformedResponse(f"{url}: content is not text")
    exchanges[index] = {"request": payload, "response": data}
    return content


def _http_generate(binding, prompt, params, parallelism, exchanges):
    slots = [None] * params.n
    if parallelism > 1 and params.n > 1:
        with ThreadPoolExecutor(max_workers=min(parallelism, params.n)) as pool:
            bodies = list(pool.map(lambda i: _http_one(binding, prompt, params, i, slots), range(params.n)))
    else:
        bodies = [_http_one(binding, prompt, params, i, slots) for i in range(params.n)]
    if exchanges is not None:
        exchanges.extend(slots)
    return bodies


# -- entry point ------------------------------------------------------------


def generate(
    binding: GeneratorBinding,
    prompt: str,
    params: SamplingParams,
    *,
    stage: StageKind,
    problem_id: str,
    parent: Candidate | None = None,
    debug_round: int = 0,
    parallelism: int = 1,
    exchanges: list | None = None,
) -> list[Candidate]:
    """Generate ``params.n`` candidates for one stage.

    ``exchanges``, when given, receives the raw request/response records of
    the http backend in index order.
    """
    stage = StageKind(stage)
    if stage is StageKind.SOLUTION and parent is None:
        raise ValueError("solution-stage generation needs the parent formulation")
    parent_id = parent.id if parent is not None else None
    if binding.kind == "synthetic":
        parent_q = None
        if stage is StageKind.SOLUTION:
            parent_q = parent.latent_quality if parent.latent_quality is not None else 1.0
        return synth_generate(
            binding.world, stage, parent_q, params.n, params.seed,
            problem_id=problem_id, parent_id=parent_id, debug_round=debug_round,
        )
    if binding.kind == "mock":
        bodies = _mock_generate(binding, prompt, params, stage)
    elif binding.kind == "http":
        bodies = _http_generate(binding, prompt, params, parallelism, exchanges)
    else:
        raise ValueError(f"unknown backend kind {binding.kind!r}")
    origin = f"debug_round_{debug_round}" if debug_round else "initial"
    return [
        Candidate(
            id=candidate_id(problem_id, stage, i, debug_round),
            stage=stage,
            body=body,
            parent_id=parent_id,
            origin=origin,
        )
        for i, body in enumerate(bodies)
    ]
