"""Shared fixture builders for the unit and acceptance tests."""

import numpy as np

from stagewise.core import Candidate, StageKind
from stagewise.prefdata import PreferenceDataset, PreferencePair
from stagewise.scoring import FEATURE_DIM, ScorerParams
from stagewise.verify import ExecStatus, ExecutionRecord

SENTINEL_PROGRAM = "print('solving')\nprint('Optimal value: 7')\n"
CRASH_PROGRAM = "x = 1\nraise RuntimeError('solver exploded')\n"
LOOP_PROGRAM = "while True:\n    pass\n"


def solution(body, cid="p/S0", parent="p/F0"):
    return Candidate(cid, StageKind.SOLUTION, body, parent_id=parent)


class AlwaysFailing:
    """Executor stub whose every run crashes; counts its calls."""

    def __init__(self):
        self.calls = 0

    def __call__(self, problem, formulation, cand):
        self.calls += 1
        return ExecutionRecord(cand.id, ExecStatus.RUNTIME_ERROR, "", "Traceback: boom\n", 0.0)


class FailUntil:
    """Executor stub that crashes until the given debug round, then verifies."""

    def __init__(self, success_round):
        self.success_round = success_round

    def __call__(self, problem, formulation, cand):
        if cand.debug_round >= self.success_round:
            return ExecutionRecord(cand.id, ExecStatus.OK, f"Optimal value: {problem.ground_truth}\n", "", 0.0,
                                   problem.ground_truth)
        return ExecutionRecord(cand.id, ExecStatus.RUNTIME_ERROR, "", "Traceback: boom\n", 0.0)


def separable_pairs(n_pairs=200, seed=0, margin=0.5, dim=FEATURE_DIM, noise=0.3):
    """Pair features separated by a fixed unit direction ``u``.

    Along ``u`` every chosen vector exceeds its rejected partner by at least
    ``margin``; the orthogonal components are independent Gaussian noise, so
    the pair differences are not all parallel to ``u``.
    """
    u = np.random.default_rng(20240611).normal(size=dim)
    u /= np.linalg.norm(u)
    rng = np.random.default_rng(seed)

    def orth(x):
        return x - np.outer(x @ u, u)

    base = rng.normal(size=(n_pairs, dim))
    gap = margin + rng.uniform(0, 1.0, size=n_pairs)
    chosen = base + noise * orth(rng.normal(size=(n_pairs, dim))) + 0.5 * gap[:, None] * u
    rejected = base + noise * orth(rng.normal(size=(n_pairs, dim))) - 0.5 * gap[:, None] * u
    return np.stack([chosen, rejected], axis=1), u


class ArrayFeaturizer:
    """Featurizer reading vectors back from a lookup keyed by body text."""

    def __init__(self, table):
        self.table = table

    def __call__(self, stage, context, body):
        return self.table[body]


def separable_dataset(n_pairs=200, seed=0, margin=0.5, prefix="sep"):
    """(dataset, featurizer, direction) for the separable trainer fixture."""
    X, u = separable_pairs(n_pairs, seed, margin)
    table, pairs = {}, []
    for i, (c, r) in enumerate(X):
        kc, kr = f"{prefix}{i}+", f"{prefix}{i}-"
        table[kc], table[kr] = c, r
        pairs.append(PreferencePair(StageKind.FORMULATION, f"ctx{i}", kc, kr,
                                    {"problem_id": f"q{i}", "chosen_id": kc, "rejected_id": kr}))
    return PreferenceDataset(StageKind.FORMULATION, tuple(pairs)), ArrayFeaturizer(table), u


def zero_params():
    return ScorerParams.zeros()
