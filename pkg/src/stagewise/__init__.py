"""Reward-guided stage-wise generation with verification-derived preference training."""

from .core import (
    Candidate,
    PipelineConfig,
    Problem,
    ScoreRecord,
    SelectionPolicy,
    StageContext,
    StageKind,
    validate_config,
)
from .dpo import DpoHyperparams, PreferenceScorer, eval_accuracy, pair_loss, pair_loss_grad, train_scorer
from .pipeline import PipelineTrace, joint_select_oracle, run_pipeline, run_stage
from .prefdata import build_pairs, credit_formulation, credit_solution, split_dataset
from .scoring import ScorerParams, extract_features, select_best, select_random
from .verify import compute_metrics, execute_candidate, parse_answer, verify

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "DpoHyperparams",
    "PipelineConfig",
    "PipelineTrace",
    "PreferenceScorer",
    "Problem",
    "ScoreRecord",
    "ScorerParams",
    "SelectionPolicy",
    "StageContext",
    "StageKind",
    "build_pairs",
    "compute_metrics",
    "credit_formulation",
    "credit_solution",
    "eval_accuracy",
    "execute_candidate",
    "extract_features",
    "joint_select_oracle",
    "pair_loss",
    "pair_loss_grad",
    "parse_answer",
    "run_pipeline",
    "run_stage",
    "select_best",
    "select_random",
    "split_dataset",
    "train_scorer",
    "validate_config",
    "verify",
]
