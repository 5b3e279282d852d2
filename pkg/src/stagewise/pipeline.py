"""Two-stage generate/score/select orchestration with a self-debugging loop."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .backends import PromptTemplate, SamplingParams, builtin_template, generate, render_prompt
from .core import (
    Candidate,
    GeneratorBinding,
    PipelineConfig,
    Problem,
    ScoreRecord,
    ScorerBinding,
    SelectionPolicy,
    StageContext,
    StageKind,
    derive_seed,
    ensure_valid,
)
from .exceptions import InstanceTooLarge, ParseError, StagewiseError, WrongStage
from .scoring import make_scorer, score_batch, select_best, select_random
from .verify import (
    ExecutionLimits,
    ExecutionRecord,
    SubprocessExecutor,
    SyntheticExecutor,
    Verdict,
    VerificationOutcome,
    verify,
)

TRACE_SCHEMA = 1
ERROR_TAIL = 2000


@dataclass(frozen=True)
class StageResult:
    stage: StageKind
    candidates: tuple[Candidate, ...]
    scores: tuple[ScoreRecord, ...]
    chosen_index: int
    selection_policy: SelectionPolicy
    exchanges: tuple = ()

    def __post_init__(self):
        if not 0 <= self.chosen_index < len(self.candidates):
            raise ValueError("chosen_index out of range")
        if self.selection_policy is SelectionPolicy.BEST_OF_N and len(self.scores) != len(self.candidates):
            raise ValueError("best_of_n needs one score per candidate")

    @property
    def chosen(self) -> Candidate:
        return self.candidates[self.chosen_index]

    def to_dict(self) -> dict:
        d = {
            "stage": self.stage.value,
            "candidates": [c.to_dict() for c in self.candidates],
            "scores": [[s.candidate_id, s.value] for s in self.scores],
            "chosen_index": self.chosen_index,
            "selection_policy": self.selection_policy.value,
        }
        if self.exchanges:
            d["exchanges"] = list(self.exchanges)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageResult":
        return cls(
            stage=StageKind(d["stage"]),
            candidates=tuple(Candidate.from_dict(c) for c in d["candidates"]),
            scores=tuple(ScoreRecord(cid, v) for cid, v in d["scores"]),
            chosen_index=d["chosen_index"],
            selection_policy=SelectionPolicy(d["selection_policy"]),
            exchanges=tuple(d.get("exchanges", ())),
        )


@dataclass(frozen=True)
class DebugRound:
    round: int
    error_info: str
    result: StageResult
    execution: ExecutionRecord
    outcome: VerificationOutcome

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "error_info": self.error_info,
            "result": self.result.to_dict(),
            "execution": self.execution.to_dict(),
            "outcome": self.outcome.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DebugRound":
        return cls(
            round=d["round"],
            error_info=d["error_info"],
            result=StageResult.from_dict(d["result"]),
            execution=ExecutionRecord.from_dict(d["execution"]),
            outcome=VerificationOutcome.from_dict(d["outcome"]),
        )


@dataclass
class PipelineTrace:
    """Record of one pipeline run. ``timing`` is wall-clock and excluded from
    :meth:`to_dict` unless asked for, so serialized traces stay reproducible."""

    problem_id: str
    formulation_stage: StageResult | None = None
    solution_stage: StageResult | None = None
    initial_execution: ExecutionRecord | None = None
    initial_outcome: VerificationOutcome | None = None
    debug_rounds: list[DebugRound] = field(default_factory=list)
    final_outcome: VerificationOutcome | None = None
    scorer_calls: int = 0
    label: dict = field(default_factory=dict)
    error: str | None = None
    timing: dict = field(default_factory=dict)

    @property
    def final_candidate_id(self) -> str | None:
        return self.final_outcome.candidate_id if self.final_outcome else None

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "schema": TRACE_SCHEMA,
            "problem_id": self.problem_id,
            "label": self.label,
            "formulation_stage": self.formulation_stage.to_dict() if self.formulation_stage else None,
            "solution_stage": self.solution_stage.to_dict() if self.solution_stage else None,
            "initial_execution": self.initial_execution.to_dict() if self.initial_execution else None,
            "initial_outcome": self.initial_outcome.to_dict() if self.initial_outcome else None,
            "debug_rounds": [r.to_dict() for r in self.debug_rounds],
            "final_outcome": self.final_outcome.to_dict() if self.final_outcome else None,
            "scorer_calls": self.scorer_calls,
            "error": self.error,
        }
        if timing:
            d["timing"] = self.timing
        return d

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineTrace":
        if d.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {d.get('schema')!r}")

        def opt(key, loader):
            return loader(d[key]) if d.get(key) is not None else None

        return cls(
            problem_id=d["problem_id"],
            formulation_stage=opt("formulation_stage", StageResult.from_dict),
            solution_stage=opt("solution_stage", StageResult.from_dict),
            initial_execution=opt("initial_execution", ExecutionRecord.from_dict),
            initial_outcome=opt("initial_outcome", VerificationOutcome.from_dict),
            debug_rounds=[DebugRound.from_dict(r) for r in d.get("debug_rounds", [])],
            final_outcome=opt("final_outcome", VerificationOutcome.from_dict),
            scorer_calls=d.get("scorer_calls", 0),
            label=d.get("label", {}),
            error=d.get("error"),
            timing=d.get("timing", {}),
        )


class PipelineError(StagewiseError, RuntimeError):
    """A run failed part-way; ``trace`` holds whatever was completed."""

    def __init__(self, message, trace: PipelineTrace):
        super().__init__(message)
        self.trace = trace


class _CountingScorer:
    def __init__(self, scorer):
        self.scorer = scorer
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, ctx, cand):
        with self._lock:
            self.calls += 1
        return self.scorer(ctx, cand)


def build_solution_context(problem: Problem, chosen_formulation: Candidate, error_info: str | None = None) -> StageContext:
    if chosen_formulation.stage is not StageKind.FORMULATION:
        raise WrongStage(f"{chosen_formulation.id} is not a formulation")
    return StageContext(StageKind.SOLUTION, problem, chosen_formulation, error_info)


def format_error_info(record: ExecutionRecord, outcome: VerificationOutcome) -> str:
    """Status label plus the stderr tail, fed back to the debugging generator."""
    if outcome.verdict is Verdict.MISMATCH:
        head = f"status: {record.status.value}; the printed optimal value {outcome.answer!r} is incorrect"
    elif record.status.value == "ok":
        head = "status: ok; no optimal value was printed"
    else:
        head = f"status: {record.status.value}"
    tail = record.stderr[-ERROR_TAIL:]
    return f"{head}\n{tail}" if tail else head


def run_stage(
    ctx: StageContext,
    backend: GeneratorBinding,
    scorer,
    n: int,
    policy: SelectionPolicy,
    seed: int,
    *,
    template: PromptTemplate | None = None,
    temperature: float = 0.3,
    max_tokens: int = 1280,
    parallelism: int = 1,
    debug_round: int = 0,
) -> StageResult:
    """Generate ``n`` candidates for ``ctx`` and pick one under ``policy``.

    ``scorer`` is a ``(ctx, cand) -> float`` callable or a ScorerBinding; it is
    only called under best_of_n.
    """
    policy = SelectionPolicy(policy)
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(scorer, ScorerBinding):
        scorer = make_scorer(scorer)
    if template is None:
        name = "formulation" if ctx.stage is StageKind.FORMULATION else ("debug" if debug_round else "solution")
        template = builtin_template(name)
    prompt = render_prompt(template, ctx)
    exchanges: list = []
    cands = generate(
        backend,
        prompt,
        SamplingParams(temperature, max_tokens, n, derive_seed(seed, "gen")),
        stage=ctx.stage,
        problem_id=ctx.problem.id,
        parent=ctx.formulation,
        debug_round=debug_round,
        parallelism=parallelism,
        exchanges=exchanges,
    )
    scores: list[ScoreRecord] = []
    if policy is SelectionPolicy.BEST_OF_N:
        scores = score_batch(scorer, ctx, cands, parallelism)
        chosen = select_best(scores)
    elif policy is SelectionPolicy.RANDOM_OF_N:
        chosen = select_random(len(cands), derive_seed(seed, "pick"))
    else:
        chosen = 0
    return StageResult(ctx.stage, tuple(cands), tuple(scores), chosen, policy, tuple(e for e in exchanges if e))


def is_correct(outcome: VerificationOutcome) -> bool:
    """Loop guard: verified, or executed when the problem has no ground truth."""
    return outcome.verdict is Verdict.VERIFIED or outcome.verdict is Verdict.NO_GROUND_TRUTH


def default_executor(cfg: PipelineConfig):
    if cfg.solution_backend.kind == "synthetic":
        return SyntheticExecutor(cfg.seed)
    return SubprocessExecutor(
        ExecutionLimits(cfg.exec_timeout, cfg.interpreter_cmd, cfg.keep_sandboxes)
    )


def _stage_size(policy: SelectionPolicy, n: int) -> int:
    return 1 if policy is SelectionPolicy.SINGLE else n


def run_pipeline(
    problem: Problem,
    cfg: PipelineConfig,
    *,
    executor: Callable | None = None,
    scorers: tuple | None = None,
    templates: dict | None = None,
    label: dict | None = None,
) -> PipelineTrace:
    """Run formulation selection, solution selection and the debug loop.

    ``executor(problem, formulation, candidate) -> ExecutionRecord`` defaults
    to simulated execution for synthetic backends and a subprocess sandbox
    otherwise. ``scorers`` optionally overrides the (formulation, solution)
    scorer callables built from the config bindings.
    """
    ensure_valid(cfg)
    executor = executor or default_executor(cfg)
    templates = templates or {}
    if scorers is None:
        scorers = (make_scorer(cfg.formulation_scorer), make_scorer(cfg.solution_scorer))
    f_scorer, s_scorer = (_CountingScorer(s) for s in scorers)
    f_policy, s_policy = SelectionPolicy(cfg.formulation_policy), SelectionPolicy(cfg.solution_policy)
    trace = PipelineTrace(problem.id, label=dict(label or {}))
    common = dict(temperature=cfg.temperature, max_tokens=cfg.max_tokens, parallelism=cfg.parallelism)

    def clock(key, t0):
        trace.timing[key] = trace.timing.get(key, 0.0) + time.perf_counter() - t0

    try:
        t0 = time.perf_counter()
        f_ctx = StageContext(StageKind.FORMULATION, problem)
        trace.formulation_stage = run_stage(
            f_ctx, cfg.formulation_backend, f_scorer, _stage_size(f_policy, cfg.n_formulations), f_policy,
            derive_seed(cfg.seed, problem.id, "F"), template=templates.get("formulation"), **common,
        )
        clock("formulation", t0)
        chosen_f = trace.formulation_stage.chosen

        t0 = time.perf_counter()
        trace.solution_stage = run_stage(
            build_solution_context(problem, chosen_f), cfg.solution_backend, s_scorer,
            _stage_size(s_policy, cfg.n_solutions), s_policy,
            derive_seed(cfg.seed, problem.id, "S"), template=templates.get("solution"), **common,
        )
        clock("solution", t0)

        t0 = time.perf_counter()
        record = executor(problem, chosen_f, trace.solution_stage.chosen)
        outcome = verify(problem, record)
        clock("execute", t0)
        trace.initial_execution, trace.initial_outcome = record, outcome

        rounds = 0
        while not is_correct(outcome) and rounds < cfg.debug_iterations:
            rounds += 1
            t0 = time.perf_counter()
            error_info = format_error_info(record, outcome)
            result = run_stage(
                build_solution_context(problem, chosen_f, error_info), cfg.solution_backend, s_scorer,
                _stage_size(s_policy, cfg.n_debug), s_policy,
                derive_seed(cfg.seed, problem.id, "D", rounds), template=templates.get("debug"),
                debug_round=rounds, **common,
            )
            record = executor(problem, chosen_f, result.chosen)
            outcome = verify(problem, record)
            trace.debug_rounds.append(DebugRound(rounds, error_info, result, record, outcome))
            clock("debug", t0)
        trace.final_outcome = outcome
    except Exception as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
        trace.scorer_calls = f_scorer.calls + s_scorer.calls
        raise PipelineError(trace.error, trace) from exc
    trace.scorer_calls = f_scorer.calls + s_scorer.calls
    return trace


def joint_select_oracle(
    problem: Problem,
    formulation_candidates: Sequence[Candidate],
    solutions_per_formulation: Sequence[Sequence[Candidate]],
    success: Callable[[Candidate, Candidate], float],
    cap: int = 4096,
) -> tuple[int, int]:
    """Exhaustive argmax of ``success(F_i, S_ij)`` over every pair.

    Ties go to the lexicographically smallest ``(i, j)``.
    """
    if not formulation_candidates or len(solutions_per_formulation) != len(formulation_candidates):
        raise ValueError("need one non-empty solution list per formulation")
    if any(len(s) == 0 for s in solutions_per_formulation):
        raise ValueError("every formulation needs at least one solution")
    total = sum(len(s) for s in solutions_per_formulation)
    if total > cap:
        raise InstanceTooLarge(f"{total} pairs exceeds the cap of {cap}")
    best, best_value = (0, 0), None
    for i, f in enumerate(formulation_candidates):
        for j, s in enumerate(solutions_per_formulation[i]):
            value = float(success(f, s))
            if best_value is None or value > best_value:
                best, best_value = (i, j), value
    return best


def expand_solutions(problem: Problem, cfg: PipelineConfig, formulations: Sequence[Candidate]) -> list[list[Candidate]]:
    """Solution pools for every formulation, drawn exactly as run_pipeline would.

    The solution stage seed does not depend on which formulation was chosen,
    so the pool under the greedy choice is the one run_pipeline generated.
    """
    seed = derive_seed(derive_seed(cfg.seed, problem.id, "S"), "gen")
    template = builtin_template("solution")
    n = _stage_size(SelectionPolicy(cfg.solution_policy), cfg.n_solutions)
    out = []
    for f in formulations:
        prompt = render_prompt(template, build_solution_context(problem, f))
        out.append(generate(cfg.solution_backend, prompt, SamplingParams(cfg.temperature, cfg.max_tokens, n, seed),
                            stage=StageKind.SOLUTION, problem_id=problem.id, parent=f))
    return out


def synthetic_success(formulation: Candidate, solution: Candidate) -> float:
    """Success probability of a synthetic-world solution (already q_F * q_S)."""
    return solution.latent_quality


def verified_success(problem: Problem, executor) -> Callable[[Candidate, Candidate], float]:
    """Success predicate that actually runs and verifies the program."""

    def success(formulation, solution):
        return float(verify(problem, executor(problem, formulation, solution)).verified)

    return success


# -- persistence ------------------------------------------------------------


def _externalize(d: dict, sidecar: Path):
    for stage_key in ("formulation_stage", "solution_stage"):
        stage = d.get(stage_key)
        if stage:
            _externalize_stage(stage, sidecar)
    for r in d.get("debug_rounds", []):
        _externalize_stage(r["result"], sidecar)


def _externalize_stage(stage: dict, sidecar: Path):
    for c in stage["candidates"]:
        digest = hashlib.sha256(c["body"].encode("utf-8")).hexdigest()
        path = sidecar / digest
        if not path.exists():
            path.write_text(c["body"], encoding="utf-8")
        c["body"] = f"sha256:{digest}"


def write_traces(path, traces, *, keep_candidates: bool = True, timing: bool = False) -> None:
    """Write traces as JSONL; without ``keep_candidates`` bodies go to a sidecar."""
    path = Path(path)
    sidecar = path.parent / (path.stem + "_bodies")
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            d = t.to_dict(timing) if isinstance(t, PipelineTrace) else dict(t)
            if not keep_candidates:
                sidecar.mkdir(parents=True, exist_ok=True)
                _externalize(d, sidecar)
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_traces(path) -> list[PipelineTrace]:
    """Parse a traces JSONL file; ``ParseError`` names the offending line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PipelineTrace.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(lineno, f"malformed trace: {exc}") from exc
    return out


def load_body(body: str, sidecar) -> str:
    """Resolve a ``sha256:`` body reference written without ``keep_candidates``."""
    if body.startswith("sha256:"):
        return (Path(sidecar) / body[7:]).read_text(encoding="utf-8")
    return body
