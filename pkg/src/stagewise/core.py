"""Shared domain types, configuration loading and validation."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .exceptions import ConfigError, ParseError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

U64_MAX = 2**64 - 1


class StageKind(str, enum.Enum):
    FORMULATION = "formulation"
    SOLUTION = "solution"

    @property
    def letter(self) -> str:
        return "F" if self is StageKind.FORMULATION else "S"


class SelectionPolicy(str, enum.Enum):
    BEST_OF_N = "best_of_n"
    RANDOM_OF_N = "random_of_n"
    SINGLE = "single"


def derive_seed(*parts: Any) -> int:
    """Stable 64-bit seed from an arbitrary tuple of printable parts."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def candidate_id(problem_id: str, stage: StageKind, index: int, debug_round: int = 0) -> str:
    cid = f"{problem_id}/{StageKind(stage).letter}{index}"
    if debug_round:
        cid += f"/d{debug_round}"
    return cid


_ORIGIN_RE = re.compile(r"^(initial|debug_round_[1-9][0-9]*)$")


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    ground_truth: float | None = None
    rel_tolerance: float = 1e-4
    abs_tolerance: float = 1e-6

    def __post_init__(self):
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if self.rel_tolerance < 0 or self.abs_tolerance < 0:
            raise ValueError(f"{self.id}: tolerances must be non-negative")
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", float(self.ground_truth))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "statement": self.statement,
            "ground_truth": self.ground_truth,
            "rel_tol": self.rel_tolerance,
            "abs_tol": self.abs_tolerance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        return cls(
            id=str(d["id"]),
            statement=str(d["statement"]),
            ground_truth=d.get("ground_truth"),
            rel_tolerance=float(d.get("rel_tol", 1e-4)),
            abs_tolerance=float(d.get("abs_tol", 1e-6)),
        )


@dataclass(frozen=True)
class Candidate:
    id: str
    stage: StageKind
    body: str
    parent_id: str | None = None
    origin: str = "initial"
    latent_quality: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage", StageKind(self.stage))
        if self.stage is StageKind.SOLUTION and not self.parent_id:
            raise ValueError(f"solution candidate {self.id} needs a parent_id")
        if not _ORIGIN_RE.match(self.origin):
            raise ValueError(f"bad origin {self.origin!r}")
        if self.latent_quality is not None and not 0.0 <= self.latent_quality <= 1.0:
            raise ValueError(f"latent_quality out of [0,1]: {self.latent_quality}")

    @property
    def debug_round(self) -> int:
        return 0 if self.origin == "initial" else int(self.origin.rsplit("_", 1)[1])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "stage": self.stage.value,
            "body": self.body,
            "parent_id": self.parent_id,
            "origin": self.origin,
            "latent_quality": self.latent_quality,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(
            id=d["id"],
            stage=StageKind(d["stage"]),
            body=d["body"],
            parent_id=d.get("parent_id"),
            origin=d.get("origin", "initial"),
            latent_quality=d.get("latent_quality"),
        )


@dataclass(frozen=True)
class ScoreRecord:
    candidate_id: str
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite score for {self.candidate_id}: {self.value}")


@dataclass(frozen=True)
class StageContext:
    """What a generator or scorer sees besides the candidate itself."""

    stage: StageKind
    problem: Problem
    formulation: Candidate | None = None
    error_info: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage", StageKind(self.stage))
        if self.stage is StageKind.SOLUTION and self.formulation is None:
            raise ValueError("solution-stage context needs a formulation")

    @property
    def text(self) -> str:
        """The conditioning text: problem statement or chosen formulation."""
        if self.stage is StageKind.FORMULATION:
            return self.problem.statement
        return self.formulation.body

    def fields(self) -> dict[str, str]:
        out = {"statement": self.problem.statement}
        if self.formulation is not None:
            out["formulation"] = self.formulation.body
        if self.error_info is not None:
            out["error_info"] = self.error_info
        return out


# -- bindings ---------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticWorldParams:
    """Latent-quality world used for desk-scale runs.

    Formulation quality is Beta(f_alpha, f_beta); solution stage quality is
    Beta(s_alpha, s_beta) and a solution's success probability is the
    product with its parent's quality. ``feature_noise`` is the std of the
    Gaussian noise added to the quality signal written into bodies.
    """

    f_alpha: float = 2.0
    f_beta: float = 2.0
    s_alpha: float = 2.0
    s_beta: float = 2.0
    feature_noise: float = 0.15
    signal_lines: int = 24
    fixed_quality: float | None = None

    def violations(self, prefix: str = "world") -> list["Violation"]:
        out = []
        for name in ("f_alpha", "f_beta", "s_alpha", "s_beta"):
            if not getattr(self, name) > 0:
                out.append(Violation(f"{prefix}.{name}", "must be > 0"))
        if self.feature_noise < 0:
            out.append(Violation(f"{prefix}.feature_noise", "must be >= 0"))
        if self.signal_lines < 1:
            out.append(Violation(f"{prefix}.signal_lines", "must be >= 1"))
        if self.fixed_quality is not None and not 0 <= self.fixed_quality <= 1:
            out.append(Violation(f"{prefix}.fixed_quality", "must be in [0, 1]"))
        return out


@dataclass(frozen=True)
class GeneratorBinding:
    kind: str = "synthetic"  # http | mock | synthetic
    endpoint: str | None = None
    model: str | None = None
    script_path: str | None = None
    world: SyntheticWorldParams | None = None
    timeout: float = 60.0
    api_key_env: str | None = None

    def violations(self, prefix: str = "backend") -> list["Violation"]:
        payloads = {
            "http": self.endpoint is not None,
            "mock": self.script_path is not None,
            "synthetic": self.world is not None,
        }
        if self.kind not in payloads:
            return [Violation(f"{prefix}.kind", f"unknown backend kind {self.kind!r}")]
        out = []
        if not payloads[self.kind]:
            out.append(Violation(prefix, f"{self.kind} backend needs its payload"))
        for other, present in payloads.items():
            if other != self.kind and present:
                out.append(Violation(prefix, f"{other} payload set on a {self.kind} backend"))
        if self.kind == "http" and not self.model:
            out.append(Violation(f"{prefix}.model", "http backend needs a model name"))
        if self.world is not None:
            out.extend(self.world.violations(f"{prefix}.world"))
        return out


@dataclass(frozen=True)
class ScorerBinding:
    """Scorer selection. ``linear`` takes params from a file, inline, or a preset."""

    kind: str = "linear"  # remote | linear | constant | random | oracle
    endpoint: str | None = None
    params_path: str | None = None
    preset: str | None = "keyword"
    params: Any = None
    value: float | None = None
    seed: int | None = None
    timeout: float = 30.0

    def violations(self, prefix: str = "scorer") -> list["Violation"]:
        kinds = ("remote", "linear", "constant", "random", "oracle")
        if self.kind not in kinds:
            return [Violation(f"{prefix}.kind", f"unknown scorer kind {self.kind!r}")]
        out = []
        if self.kind == "remote" and not self.endpoint:
            out.append(Violation(f"{prefix}.endpoint", "remote scorer needs an endpoint"))
        if self.kind == "linear":
            n = sum(x is not None for x in (self.params_path, self.params, self.preset))
            if n != 1:
                out.append(Violation(prefix, "linear scorer needs exactly one of params_path, params, preset"))
        if self.kind == "constant" and (self.value is None or not math.isfinite(self.value)):
            out.append(Violation(f"{prefix}.value", "constant scorer needs a finite value"))
        if self.kind == "random" and (self.seed is None or not 0 <= self.seed <= U64_MAX):
            out.append(Violation(f"{prefix}.seed", "random scorer needs a u64 seed"))
        return out


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


def _default_synthetic():
    return GeneratorBinding(kind="synthetic", world=SyntheticWorldParams())


@dataclass(frozen=True)
class PipelineConfig:
    """Run configuration. Defaults: 32 samples per stage, 16 per debug round, one round."""

    n_formulations: int = 32
    n_solutions: int = 32
    n_debug: int = 16
    debug_iterations: int = 1
    temperature: float = 0.3
    max_tokens: int = 1280
    seed: int = 0
    formulation_policy: SelectionPolicy = SelectionPolicy.BEST_OF_N
    solution_policy: SelectionPolicy = SelectionPolicy.BEST_OF_N
    formulation_scorer: ScorerBinding = field(default_factory=ScorerBinding)
    solution_scorer: ScorerBinding = field(default_factory=ScorerBinding)
    formulation_backend: GeneratorBinding = field(default_factory=_default_synthetic)
    solution_backend: GeneratorBinding = field(default_factory=_default_synthetic)
    parallelism: int = 1
    exec_timeout: float = 10.0
    interpreter_cmd: str = "python3"
    keep_sandboxes: bool = False
    max_joint_pairs: int = 4096

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        def enc(v):
            if dataclasses.is_dataclass(v):
                return {k: enc(x) for k, x in dataclasses.asdict(v).items()}
            if isinstance(v, enum.Enum):
                return v.value
            return v

        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ScorerBinding) and v.params is not None:
                v = dataclasses.replace(v, params=None)
            out[f.name] = enc(v)
        return out


def validate_config(cfg: PipelineConfig) -> list[Violation]:
    """Return every violated invariant of ``cfg``; an empty list means valid."""
    out: list[Violation] = []

    def count(name, lo):
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, int) or v < lo:
            out.append(Violation(name, f"must be an integer >= {lo}, got {v!r}"))

    count("n_formulations", 1)
    count("n_solutions", 1)
    count("n_debug", 1)
    count("debug_iterations", 0)
    count("max_tokens", 1)
    count("parallelism", 1)
    count("max_joint_pairs", 1)
    if not (isinstance(cfg.temperature, (int, float)) and cfg.temperature >= 0):
        out.append(Violation("temperature", f"must be >= 0, got {cfg.temperature!r}"))
    if not (isinstance(cfg.seed, int) and 0 <= cfg.seed <= U64_MAX):
        out.append(Violation("seed", "must be a 64-bit unsigned integer"))
    if not cfg.exec_timeout > 0:
        out.append(Violation("exec_timeout", "must be > 0"))
    if not cfg.interpreter_cmd.strip():
        out.append(Violation("interpreter_cmd", "must be non-empty"))
    for name in ("formulation_policy", "solution_policy"):
        try:
            SelectionPolicy(getattr(cfg, name))
        except ValueError:
            out.append(Violation(name, f"unknown policy {getattr(cfg, name)!r}"))
    out.extend(cfg.formulation_scorer.violations("formulation_scorer"))
    out.extend(cfg.solution_scorer.violations("solution_scorer"))
    out.extend(cfg.formulation_backend.violations("formulation_backend"))
    out.extend(cfg.solution_backend.violations("solution_backend"))
    return out


def ensure_valid(cfg: PipelineConfig) -> PipelineConfig:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


# -- loading ----------------------------------------------------------------


def _world_from(d):
    return SyntheticWorldParams(**d) if d is not None else None


def generator_binding_from_dict(d: dict) -> GeneratorBinding:
    d = dict(d)
    if "world" in d:
        d["world"] = _world_from(d["world"])
    elif d.get("kind", "synthetic") == "synthetic":
        d["world"] = SyntheticWorldParams()
    return GeneratorBinding(**d)


def scorer_binding_from_dict(d: dict) -> ScorerBinding:
    d = dict(d)
    if d.get("kind", "linear") != "linear" or "params_path" in d:
        d.setdefault("preset", None)
    return ScorerBinding(**d)


def config_from_dict(d: dict) -> PipelineConfig:
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError([Violation(k, "unknown config key") for k in sorted(unknown)])
    kw = dict(d)
    for name in ("formulation_backend", "solution_backend"):
        if name in kw:
            kw[name] = generator_binding_from_dict(kw[name])
    for name in ("formulation_scorer", "solution_scorer"):
        if name in kw:
            kw[name] = scorer_binding_from_dict(kw[name])
    for name in ("formulation_policy", "solution_policy"):
        if name in kw:
            kw[name] = SelectionPolicy(kw[name])
    return PipelineConfig(**kw)


def read_structured(path) -> dict:
    """Read a TOML or JSON document into a dict (chosen by file suffix)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return json.loads(path.read_text())
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path) -> PipelineConfig:
    return config_from_dict(read_structured(path))


def load_suite(path) -> list[Problem]:
    problems = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                problem = Problem.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(lineno, str(exc)) from exc
            if problem.id in seen:
                raise ParseError(lineno, f"duplicate problem id {problem.id!r}")
            seen.add(problem.id)
            problems.append(problem)
    return problems


def write_suite(path, problems) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_dict()) + "\n")
