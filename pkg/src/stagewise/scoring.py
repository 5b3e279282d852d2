"""Candidate scoring and selection policies.

The linear scorer works on a fixed 70-dimensional featurization of a
(context, candidate) pair:

====  ==========================================================
0     body length in bytes / 1000
1     line count / 50
2     mean byte value / 128
3     word-set Jaccard overlap between context and body
4     positive keyword hits for the stage / 10
5     negative keyword hits for the stage / 10
6-69  character-bigram counts hashed into 64 buckets, normalized
====  ==========================================================
"""

from __future__ import annotations

import json
import math
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .backends import post_with_retries
from .core import Candidate, ScoreRecord, ScorerBinding, StageContext, StageKind, derive_seed
from .exceptions import DimensionMismatch, EmptyBatch, MalformedResponse, NonFiniteScore

__all__ = [
    "FEATURE_DIM",
    "FEATURE_SPEC_VERSION",
    "KEYWORDS",
    "ScorerParams",
    "StageContext",
    "TextFeaturizer",
    "extract_features",
    "featurize",
    "keyword_params",
    "make_scorer",
    "score",
    "score_batch",
    "select_best",
    "select_random",
]

FEATURE_DIM = 70
FEATURE_SPEC_VERSION = "bigram64-v1"
N_BUCKETS = 64
_STATS = 6

KEYWORDS = {
    StageKind.FORMULATION: (
        ("constraint", "objective", "variable", "parameter", "subject to"),
        ("unclear", "ambiguous", "unknown", "todo"),
    ),
    StageKind.SOLUTION: (
        ("add_constraint", "addconstr", "solve(", "optimal value", "linprog"),
        ("todo", "notimplemented", "undefined", "placeholder"),
    ),
}

_WORD = re.compile(r"[a-z0-9_]+")


@lru_cache(maxsize=1)
def _bigram_table() -> np.ndarray:
    codes = np.arange(65536, dtype=np.uint32)
    return np.array(
        [zlib.crc32(int(c).to_bytes(2, "big")) % N_BUCKETS for c in codes], dtype=np.intp
    )


def featurize(stage: StageKind, context_text: str, body: str) -> np.ndarray:
    """Feature vector of a candidate body in its stage context."""
    stage = StageKind(stage)
    out = np.zeros(FEATURE_DIM)
    raw = body.encode("utf-8")
    if not raw:
        return out
    arr = np.frombuffer(raw, dtype=np.uint8)
    out[0] = len(raw) / 1000.0
    out[1] = len(body.splitlines()) / 50.0
    out[2] = float(arr.mean()) / 128.0
    ctx_words = set(_WORD.findall(context_text.lower()))
    lowered = body.lower()
    body_words = set(_WORD.findall(lowered))
    union = ctx_words | body_words
    out[3] = len(ctx_words & body_words) / len(union) if union else 0.0
    good, bad = KEYWORDS[stage]
    out[4] = sum(lowered.count(k) for k in good) / 10.0
    out[5] = sum(lowered.count(k) for k in bad) / 10.0
    if len(arr) > 1:
        codes = arr[:-1].astype(np.intp) * 256 + arr[1:]
        buckets = np.bincount(_bigram_table()[codes], minlength=N_BUCKETS)
        out[_STATS:] = buckets / (len(arr) - 1)
    return out


def extract_features(ctx: StageContext, cand: Candidate) -> np.ndarray:
    return featurize(ctx.stage, ctx.text, cand.body)


class TextFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping ``(context, body)`` pairs to features."""

    def __init__(self, stage="formulation"):
        self.stage = stage

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        rows = [featurize(self.stage, ctx, body) for ctx, body in X]
        return np.vstack(rows) if rows else np.zeros((0, FEATURE_DIM))


@dataclass(frozen=True, eq=False)
class ScorerParams:
    weights: np.ndarray
    bias: float = 0.0
    feature_spec_version: str = FEATURE_SPEC_VERSION

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1).copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        if not (np.all(np.isfinite(w)) and math.isfinite(self.bias)):
            raise ValueError("scorer params must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, ScorerParams)
            and np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
            and self.feature_spec_version == other.feature_spec_version
        )

    @classmethod
    def zeros(cls, dim: int = FEATURE_DIM, bias: float = 0.0) -> "ScorerParams":
        return cls(np.zeros(dim), bias)

    def decision(self, features: np.ndarray) -> np.ndarray | float:
        features = np.asarray(features, dtype=float)
        if features.shape[-1] != self.dim:
            raise DimensionMismatch(f"features have dim {features.shape[-1]}, params {self.dim}")
        return features @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "feature_spec_version": self.feature_spec_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerParams":
        params = cls(np.asarray(d["weights"], dtype=float), d.get("bias", 0.0),
                     d.get("feature_spec_version", FEATURE_SPEC_VERSION))
        if params.dim != int(d.get("dim", params.dim)):
            raise DimensionMismatch(f"dim field {d['dim']} != {params.dim} weights")
        return params

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ScorerParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def keyword_params() -> ScorerParams:
    """Hand-set scorer: positive keyword hits minus negative keyword hits."""
    w = np.zeros(FEATURE_DIM)
    w[4], w[5] = 1.0, -1.0
    return ScorerParams(w)


PRESETS = {"keyword": keyword_params}


@lru_cache(maxsize=32)
def _params_from_file(path: str, mtime: float) -> ScorerParams:
    return ScorerParams.load(path)


def resolve_params(binding: ScorerBinding) -> ScorerParams:
    if binding.params is not None:
        p = binding.params
        return p if isinstance(p, ScorerParams) else ScorerParams.from_dict(p)
    if binding.params_path is not None:
        path = str(binding.params_path)
        return _params_from_file(path, Path(path).stat().st_mtime)
    try:
        return PRESETS[binding.preset]()
    except KeyError:
        raise ValueError(f"unknown scorer preset {binding.preset!r}") from None


def _remote_score(binding, ctx, cand):
    url = binding.endpoint.rstrip("/") + "/score"
    payload = {
        "context": {"stage": ctx.stage.value, **ctx.fields()},
        "candidate": {"id": cand.id, "body": cand.body},
    }
    resp = post_with_retries(url, payload, timeout=binding.timeout)
    try:
        data = resp.json()
    except ValueError as exc:
        raise MalformedResponse(f"{url}: reply is not JSON") from exc
    value = data.get("score") if isinstance(data, dict) else data
    if isinstance(value, str):
        try:
            parsed = float(value)
        except ValueError:
            parsed = None
        if parsed is not None and not math.isfinite(parsed):
            raise NonFiniteScore(f"{url} returned {value!r} for {cand.id}")
        raise MalformedResponse(f"{url}: score is a string, not a number")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedResponse(f"{url}: reply has no numeric score")
    return float(value)


def make_scorer(binding: ScorerBinding) -> Callable[[StageContext, Candidate], float]:
    """Build a ``(ctx, cand) -> float`` callable; every result is checked finite."""
    if binding.kind == "linear":
        params = resolve_params(binding)

        def raw(ctx, cand):
            return float(params.decision(extract_features(ctx, cand)))
    elif binding.kind == "constant":
        value = float(binding.value)

        def raw(ctx, cand):
            return value
    elif binding.kind == "random":
        seed = binding.seed

        def raw(ctx, cand):
            return float(np.random.default_rng(derive_seed(seed, cand.id)).random())
    elif binding.kind == "remote":
        def raw(ctx, cand):
            return _remote_score(binding, ctx, cand)
    elif binding.kind == "oracle":
        def raw(ctx, cand):
            if cand.latent_quality is None:
                raise ValueError(f"oracle scorer needs latent quality on {cand.id}")
            return cand.latent_quality
    else:
        raise ValueError(f"unknown scorer kind {binding.kind!r}")

    def scorer(ctx, cand):
        value = raw(ctx, cand)
        if not math.isfinite(value):
            raise NonFiniteScore(f"{binding.kind} scorer gave {value} for {cand.id}")
        return value

    return scorer


def score(binding: ScorerBinding, ctx: StageContext, cand: Candidate) -> float:
    return make_scorer(binding)(ctx, cand)


def score_batch(scorer, ctx: StageContext, cands: Sequence[Candidate], parallelism: int = 1) -> list[ScoreRecord]:
    """Score candidates, possibly concurrently; records keep candidate order."""
    if parallelism > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=min(parallelism, len(cands))) as pool:
            values = list(pool.map(lambda c: scorer(ctx, c), cands))
    else:
        values = [scorer(ctx, c) for c in cands]
    return [ScoreRecord(c.id, v) for c, v in zip(cands, values)]


def select_best(scores) -> int:
    """Index of the highest score; the lowest index wins ties."""
    values = [s.value if isinstance(s, ScoreRecord) else float(s) for s in scores]
    if not values:
        raise EmptyBatch("cannot select from an empty batch")
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def select_random(n: int, seed: int) -> int:
    if n < 1:
        raise EmptyBatch("cannot select from an empty batch")
    return int(np.random.default_rng(seed).integers(n))
