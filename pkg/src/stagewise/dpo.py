"""Pairwise preference loss and a trainer for the linear scorer.

The loss on one pair is ``-log sigmoid((r_plus - r_minus) / beta)``: beta
divides the score margin. Training keeps the generators out of the loop and
only fits scorer weights.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import StageKind
from .exceptions import DimensionMismatch, EmptyDataset, InvalidBeta
from .prefdata import PreferenceDataset, PreferencePair
from .scoring import FEATURE_DIM, ScorerParams, featurize


def _check_beta(beta):
    if not beta > 0:
        raise InvalidBeta(f"beta must be > 0, got {beta}")


def pair_loss(r_plus, r_minus, beta=0.1):
    """-log sigmoid((r_plus - r_minus) / beta), evaluated as softplus(-margin)."""
    _check_beta(beta)
    x = (np.asarray(r_plus, dtype=float) - np.asarray(r_minus, dtype=float)) / beta
    out = np.logaddexp(0.0, -x)
    return float(out) if out.ndim == 0 else out


def pair_loss_grad(r_plus, r_minus, beta=0.1):
    """(dL/dr_plus, dL/dr_minus); the two always sum to zero."""
    _check_beta(beta)
    x = (np.asarray(r_plus, dtype=float) - np.asarray(r_minus, dtype=float)) / beta
    g = expit(-x) / beta
    if g.ndim == 0:
        return -float(g), float(g)
    return -g, g


@dataclass(frozen=True)
class DpoHyperparams:
    beta: float = 0.1
    learning_rate: float = 0.1
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    eval_ratio: float = 0.1

    def __post_init__(self):
        _check_beta(self.beta)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.eval_ratio < 1:
            raise ValueError("eval_ratio must be in [0, 1)")


class PairFeaturizer(TransformerMixin, BaseEstimator):
    """Turn preference pairs into an array of shape (n_pairs, 2, n_features).

    Index 0 along the middle axis is the chosen side, 1 the rejected side.
    """

    def __init__(self, stage="formulation", featurizer=None):
        self.stage = stage
        self.featurizer = featurizer

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        fn = self.featurizer or featurize
        rows = []
        for p in X:
            if isinstance(p, PreferencePair):
                stage, ctx, chosen, rejected = p.stage, p.context, p.chosen, p.rejected
            else:
                stage, (ctx, chosen, rejected) = StageKind(self.stage), p
            rows.append((fn(stage, ctx, chosen), fn(stage, ctx, rejected)))
        if not rows:
            return np.zeros((0, 2, FEATURE_DIM))
        return np.asarray(rows, dtype=float)


def _pairwise_accuracy(w, b, X):
    s = X @ w + b
    return float(np.mean(s[:, 0] > s[:, 1]))


def _mean_loss(w, X, beta):
    margin = (X[:, 0] - X[:, 1]) @ w
    return float(np.mean(np.logaddexp(0.0, -margin / beta)))


MAX_HALVINGS = 10


def _epoch(w, diff, order, batch_size, lr, beta):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        margin = diff[idx] @ w / beta
        coeff = -expit(-margin) / beta  # dL/dr_plus per pair
        w = w - lr * (coeff @ diff[idx]) / len(idx)
    return w


class PreferenceScorer(BaseEstimator):
    """Linear scorer ``w . phi + b`` fitted with the pairwise preference loss.

    ``fit`` takes pair features of shape (n_pairs, 2, n_features). ``score``
    returns pairwise accuracy, with ties counted as wrong.

    The full-batch loss never increases across epochs: an epoch that would
    raise it is rolled back and repeated with the learning rate halved.
    ``lr_curve_`` records the rate in effect after each epoch.
    """

    def __init__(self, beta=0.1, learning_rate=0.1, epochs=5, batch_size=16, random_state=0, init=None):
        self.beta = beta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.init = init

    def _check_pairs(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[1] != 2:
            raise ValueError(f"expected pair features of shape (n, 2, d), got {X.shape}")
        if X.shape[0] == 0:
            raise EmptyDataset("no preference pairs")
        if not np.all(np.isfinite(X)):
            raise ValueError("pair features must be finite")
        return X

    def fit(self, X, y=None, X_eval=None):
        _check_beta(self.beta)
        X = self._check_pairs(X)
        d = X.shape[2]
        init = self.init if self.init is not None else ScorerParams.zeros(d)
        if init.dim != d:
            raise DimensionMismatch(f"init has dim {init.dim}, features have dim {d}")
        w = np.array(init.weights, dtype=float)
        b = init.bias
        X_eval = self._check_pairs(X_eval) if X_eval is not None and len(X_eval) else None
        diff = X[:, 0] - X[:, 1]
        rng = np.random.default_rng(self.random_state)
        self.initial_loss_ = loss = _mean_loss(w, X, self.beta)
        self.loss_curve_, self.train_accuracy_curve_, self.eval_accuracy_curve_, self.eval_loss_curve_ = [], [], [], []
        self.lr_curve_ = []
        lr = self.learning_rate
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            # An epoch that raises the full-batch loss is undone and retried at half the rate.
            # If no rate down to lr / 2**MAX_HALVINGS helps, the epoch is skipped.
            step = lr
            for _attempt in range(MAX_HALVINGS + 1):
                w_new = _epoch(w, diff, order, self.batch_size, step, self.beta)
                new_loss = _mean_loss(w_new, X, self.beta)
                if new_loss <= loss:
                    w, loss, lr = w_new, new_loss, step
                    break
                step /= 2
            self.lr_curve_.append(lr)
            self.loss_curve_.append(loss)
            self.train_accuracy_curve_.append(_pairwise_accuracy(w, b, X))
            if X_eval is not None:
                self.eval_accuracy_curve_.append(_pairwise_accuracy(w, b, X_eval))
                self.eval_loss_curve_.append(_mean_loss(w, X_eval, self.beta))
        self.coef_ = w
        self.intercept_ = b
        self.n_features_in_ = d
        return self

    @property
    def params_(self) -> ScorerParams:
        check_is_fitted(self, "coef_")
        return ScorerParams(self.coef_, self.intercept_)

    def decision_function(self, F):
        check_is_fitted(self, "coef_")
        return self.params_.decision(F)

    def score(self, X, y=None):
        check_is_fitted(self, "coef_")
        return _pairwise_accuracy(self.coef_, self.intercept_, self._check_pairs(X))


@dataclass
class TrainReport:
    loss_curve: list[float]
    final_params: ScorerParams
    train_accuracy: float
    eval_accuracy: float
    initial_loss: float = float("nan")
    train_accuracy_curve: list[float] = field(default_factory=list)
    eval_accuracy_curve: list[float] = field(default_factory=list)
    eval_loss_curve: list[float] = field(default_factory=list)
    lr_curve: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "loss_curve": self.loss_curve,
            "initial_loss": self.initial_loss,
            "train_accuracy": self.train_accuracy,
            "eval_accuracy": self.eval_accuracy,
            "train_accuracy_curve": self.train_accuracy_curve,
            "eval_accuracy_curve": self.eval_accuracy_curve,
            "eval_loss_curve": self.eval_loss_curve,
            "lr_curve": self.lr_curve,
            "final_params": self.final_params.to_dict(),
        }

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "loss", "train_acc", "eval_acc"])
                for i, loss in enumerate(self.loss_curve):
                    ev = self.eval_accuracy_curve[i] if i < len(self.eval_accuracy_curve) else ""
                    w.writerow([i + 1, repr(loss), repr(self.train_accuracy_curve[i]), repr(ev) if ev != "" else ""])


def train_scorer(
    ds_train: PreferenceDataset,
    featurizer: Callable | None = None,
    init: ScorerParams | None = None,
    hp: DpoHyperparams = DpoHyperparams(),
    ds_eval: PreferenceDataset | None = None,
) -> TrainReport:
    """Mini-batch gradient descent on the mean pair loss.

    Batches follow a seeded shuffle, so the report is a pure function of
    the inputs. ``eval_accuracy`` is measured on ``ds_eval`` (falls back to
    the training pairs when no eval set is given).
    """
    if len(ds_train) == 0:
        raise EmptyDataset("training set is empty")
    fe = PairFeaturizer(ds_train.stage, featurizer)
    X = fe.transform(ds_train.pairs)
    X_eval = fe.transform(ds_eval.pairs) if ds_eval is not None and len(ds_eval) else None
    init = init if init is not None else ScorerParams.zeros(X.shape[2])
    est = PreferenceScorer(hp.beta, hp.learning_rate, hp.epochs, hp.batch_size, hp.seed, init).fit(X, X_eval=X_eval)
    train_acc = est.train_accuracy_curve_[-1]
    eval_acc = est.eval_accuracy_curve_[-1] if X_eval is not None else train_acc
    return TrainReport(
        loss_curve=list(est.loss_curve_),
        final_params=est.params_,
        train_accuracy=train_acc,
        eval_accuracy=eval_acc,
        initial_loss=est.initial_loss_,
        train_accuracy_curve=list(est.train_accuracy_curve_),
        eval_accuracy_curve=list(est.eval_accuracy_curve_),
        eval_loss_curve=list(est.eval_loss_curve_),
        lr_curve=list(est.lr_curve_),
    )


def eval_accuracy(params: ScorerParams, pairs: PreferenceDataset, featurizer: Callable | None = None) -> float:
    """Fraction of pairs scored chosen > rejected; ties count as wrong."""
    if len(pairs) == 0:
        raise EmptyDataset("no pairs to evaluate")
    X = PairFeaturizer(pairs.stage, featurizer).transform(pairs.pairs)
    if X.shape[2] != params.dim:
        raise DimensionMismatch(f"features have dim {X.shape[2]}, params {params.dim}")
    return _pairwise_accuracy(params.weights, params.bias, X)
