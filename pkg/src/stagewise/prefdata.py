"""Preference-pair construction from verified rollouts.

A formulation is credited positive when at least one solution generated
from it verifies; a solution is positive when it verifies. Pairs are the
positives x negatives cross product within each context, optionally capped
by seeded subsampling.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backends import SamplingParams, builtin_template, generate, render_prompt
from .core import Candidate, PipelineConfig, Problem, StageContext, StageKind, derive_seed
from .exceptions import InvalidRatio, ParseError
from .verify import VerificationOutcome, execute_many, verify

log = logging.getLogger(__name__)


class CreditLabel(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


def credit_solution(outcome: VerificationOutcome) -> CreditLabel:
    return CreditLabel.POSITIVE if outcome.verified else CreditLabel.NEGATIVE


def credit_formulation(downstream: Iterable[VerificationOutcome]) -> CreditLabel:
    """Positive iff some downstream solution verified (false on an empty list)."""
    return CreditLabel.POSITIVE if any(o.verified for o in downstream) else CreditLabel.NEGATIVE


@dataclass(frozen=True)
class FormulationRollout:
    formulation: Candidate
    solutions: tuple[Candidate, ...] = ()
    outcomes: tuple[VerificationOutcome, ...] = ()

    def __post_init__(self):
        if len(self.solutions) != len(self.outcomes):
            raise ValueError("one outcome per solution")

    def to_dict(self) -> dict:
        return {
            "formulation": self.formulation.to_dict(),
            "solutions": [s.to_dict() for s in self.solutions],
            "outcomes": [o.to_dict() for o in self.outcomes],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            Candidate.from_dict(d["formulation"]),
            tuple(Candidate.from_dict(s) for s in d["solutions"]),
            tuple(VerificationOutcome.from_dict(o) for o in d["outcomes"]),
        )


@dataclass(frozen=True)
class ProblemRollout:
    problem: Problem
    formulations: tuple[FormulationRollout, ...]
    run_id: str = "run0"

    def to_dict(self) -> dict:
        return {
            "problem": self.problem.to_dict(),
            "run_id": self.run_id,
            "formulations": [f.to_dict() for f in self.formulations],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            Problem.from_dict(d["problem"]),
            tuple(FormulationRollout.from_dict(f) for f in d["formulations"]),
            d.get("run_id", "run0"),
        )


@dataclass(frozen=True)
class PreferencePair:
    stage: StageKind
    context: str
    chosen: str
    rejected: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "stage", StageKind(self.stage))
        p = self.provenance
        if p.get("chosen_id") is not None and p.get("chosen_id") == p.get("rejected_id"):
            raise ValueError("chosen and rejected are the same candidate")

    @property
    def problem_id(self) -> str:
        return self.provenance.get("problem_id", "")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "context": self.context,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreferencePair":
        return cls(StageKind(d["stage"]), d["context"], d["chosen"], d["rejected"], dict(d.get("provenance", {})))


@dataclass(frozen=True)
class DatasetStats:
    n_contexts: int = 0
    n_pairs: int = 0
    n_positive: int = 0
    n_negative: int = 0

    def to_dict(self) -> dict:
        return {
            "n_contexts": self.n_contexts,
            "n_pairs": self.n_pairs,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
        }


def _context_key(pair: PreferencePair):
    return (pair.problem_id, pair.provenance.get("context_id", pair.context))


@dataclass(frozen=True)
class PreferenceDataset:
    stage: StageKind
    pairs: tuple[PreferencePair, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stage", StageKind(self.stage))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        seen = set()
        for p in self.pairs:
            if p.stage is not self.stage:
                raise ValueError(f"{p.stage.value} pair in a {self.stage.value} dataset")
            ids = (p.provenance.get("chosen_id"), p.provenance.get("rejected_id"))
            if ids == (None, None):
                continue
            key = (_context_key(p), ids)
            if key in seen:
                raise ValueError(f"duplicate pair {ids} in context {key[0]}")
            seen.add(key)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def stats(self) -> DatasetStats:
        return dataset_stats(self)

    def subset(self, indices) -> "PreferenceDataset":
        return PreferenceDataset(self.stage, tuple(self.pairs[i] for i in indices))


def dataset_stats(ds: PreferenceDataset) -> DatasetStats:
    contexts, pos, neg = set(), set(), set()
    for p in ds.pairs:
        key = _context_key(p)
        contexts.add(key)
        pos.add((key, p.provenance.get("chosen_id", p.chosen)))
        neg.add((key, p.provenance.get("rejected_id", p.rejected)))
    return DatasetStats(len(contexts), len(ds.pairs), len(pos), len(neg))


def format_pair_table(rows: Sequence[tuple[str, int, PreferenceDataset, PreferenceDataset]]) -> str:
    """Render (subset, sample size, formulation ds, solution ds) rows as a table."""
    header = ("Subset", "Sample Size", "# (p, f+, f-)", "# (f, s+, s-)")
    body = [(name, f"{size}", f"{len(f):,}", f"{len(s):,}") for name, size, f, s in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PairingPolicy:
    cap_per_context: int | None = None
    seed: int = 0


def _cross_pairs(positives, negatives, policy, context_tag):
    raw = [(p, n) for p in positives for n in negatives]
    cap = policy.cap_per_context
    if cap is not None and len(raw) > cap:
        rng = np.random.default_rng(derive_seed(policy.seed, *context_tag))
        keep = np.sort(rng.choice(len(raw), size=cap, replace=False))
        raw = [raw[i] for i in keep]
    return raw


def build_pairs(rollouts: Iterable[ProblemRollout], policy: PairingPolicy = PairingPolicy()):
    """Build (formulation dataset, solution dataset) from verified rollouts."""
    f_pairs, s_pairs = [], []
    for ro in rollouts:
        pid = ro.problem.id
        labelled = [
            (fr, credit_formulation(fr.outcomes)) for fr in ro.formulations if fr.solutions
        ]
        pos = [fr.formulation for fr, lab in labelled if lab is CreditLabel.POSITIVE]
        neg = [fr.formulation for fr, lab in labelled if lab is CreditLabel.NEGATIVE]
        for c, r in _cross_pairs(pos, neg, policy, (pid, "F")):
            f_pairs.append(PreferencePair(
                StageKind.FORMULATION, ro.problem.statement, c.body, r.body,
                {"problem_id": pid, "run_id": ro.run_id, "context_id": pid,
                 "chosen_id": c.id, "rejected_id": r.id},
            ))
        for fr in ro.formulations:
            spos = [s for s, o in zip(fr.solutions, fr.outcomes) if credit_solution(o) is CreditLabel.POSITIVE]
            sneg = [s for s, o in zip(fr.solutions, fr.outcomes) if credit_solution(o) is CreditLabel.NEGATIVE]
            for c, r in _cross_pairs(spos, sneg, policy, (pid, fr.formulation.id)):
                s_pairs.append(PreferencePair(
                    StageKind.SOLUTION, fr.formulation.body, c.body, r.body,
                    {"problem_id": pid, "run_id": ro.run_id, "context_id": fr.formulation.id,
                     "chosen_id": c.id, "rejected_id": r.id},
                ))
    return PreferenceDataset(StageKind.FORMULATION, f_pairs), PreferenceDataset(StageKind.SOLUTION, s_pairs)


def audit_pairs(rollouts: Iterable[ProblemRollout], *datasets: PreferenceDataset) -> list[str]:
    """Re-derive every label from the rollouts and report inconsistent pairs.

    Returns one message per pair whose chosen side is not positive or whose
    rejected side is not negative; an empty list means the audit passed.
    """
    labels = {}
    for ro in rollouts:
        for fr in ro.formulations:
            labels[(StageKind.FORMULATION, fr.formulation.id)] = credit_formulation(fr.outcomes)
            for s, o in zip(fr.solutions, fr.outcomes):
                labels[(StageKind.SOLUTION, s.id)] = credit_solution(o)
    problems = []
    for ds in datasets:
        for p in ds.pairs:
            c = labels.get((p.stage, p.provenance.get("chosen_id")))
            r = labels.get((p.stage, p.provenance.get("rejected_id")))
            if c is not CreditLabel.POSITIVE or r is not CreditLabel.NEGATIVE:
                problems.append(f"{p.stage.value} pair {p.provenance.get('chosen_id')} > "
                                f"{p.provenance.get('rejected_id')}: labels {c}, {r}")
    return problems


def split_dataset(ds: PreferenceDataset, eval_ratio: float, seed: int = 0):
    """Seeded train/eval split that keeps each problem's pairs on one side.

    Problems are visited in shuffled order; one moves to eval when that
    brings the eval size closer to ``round(eval_ratio * len(ds))`` (or when
    eval is still empty and the target is positive). The training side always
    keeps at least one problem. The size is exact when every problem
    contributes one pair.
    """
    if not 0 <= eval_ratio < 1:
        raise InvalidRatio(f"eval_ratio must be in [0, 1), got {eval_ratio}")
    target = round(eval_ratio * len(ds))
    groups = defaultdict(list)
    for i, p in enumerate(ds.pairs):
        groups[p.problem_id].append(i)
    order = sorted(groups)
    np.random.default_rng(seed).shuffle(order)
    eval_idx = []
    for pid in order:
        size = len(groups[pid])
        if len(eval_idx) + size == len(ds):
            continue
        gap = abs(target - len(eval_idx))
        if abs(target - len(eval_idx) - size) < gap or (target > 0 and not eval_idx):
            eval_idx.extend(groups[pid])
    eval_set = set(eval_idx)
    train_idx = [i for i in range(len(ds)) if i not in eval_set]
    return ds.subset(train_idx), ds.subset(sorted(eval_idx))


# -- rollouts ---------------------------------------------------------------


def collect_rollouts(
    problems: Sequence[Problem],
    cfg: PipelineConfig,
    n: int,
    executor,
    *,
    run_id: str = "run0",
    n_solutions: int | None = None,
) -> list[ProblemRollout]:
    """Generate n formulations per problem, n solutions per formulation, verify all."""
    n_solutions = n_solutions or n
    f_tmpl, s_tmpl = builtin_template("formulation"), builtin_template("solution")
    out = []
    for problem in problems:
        f_ctx = StageContext(StageKind.FORMULATION, problem)
        forms = generate(
            cfg.formulation_backend, render_prompt(f_tmpl, f_ctx),
            SamplingParams(cfg.temperature, cfg.max_tokens, n, derive_seed(cfg.seed, problem.id, "rollout-F")),
            stage=StageKind.FORMULATION, problem_id=problem.id, parallelism=cfg.parallelism,
        )
        per_form = []
        for i, f in enumerate(forms):
            s_ctx = StageContext(StageKind.SOLUTION, problem, f)
            sols = generate(
                cfg.solution_backend, render_prompt(s_tmpl, s_ctx),
                SamplingParams(cfg.temperature, cfg.max_tokens, n_solutions,
                               derive_seed(cfg.seed, problem.id, "rollout-S", i)),
                stage=StageKind.SOLUTION, problem_id=f"{problem.id}/F{i}", parent=f,
                parallelism=cfg.parallelism,
            )
            records = execute_many(executor, [(problem, f, s) for s in sols], cfg.parallelism)
            per_form.append(FormulationRollout(f, tuple(sols), tuple(verify(problem, r) for r in records)))
        out.append(ProblemRollout(problem, tuple(per_form), run_id))
    return out


# -- persistence ------------------------------------------------------------


def write_pairs(path, ds: PreferenceDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in ds.pairs:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def read_pairs(path, stage: StageKind | None = None) -> PreferenceDataset:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pairs.append(PreferencePair.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(lineno, f"malformed pair: {exc}") from exc
    if stage is None:
        stage = pairs[0].stage if pairs else StageKind.FORMULATION
    return PreferenceDataset(StageKind(stage), tuple(pairs))


def write_rollouts(path, rollouts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rollouts:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_rollouts(path) -> list[ProblemRollout]:
    with open(path, encoding="utf-8") as fh:
        return [ProblemRollout.from_dict(json.loads(line)) for line in fh if line.strip()]
