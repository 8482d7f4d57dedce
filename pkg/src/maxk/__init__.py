"""Certified accuracy lower bounds for tiny max-of-K attention models.

Train a one-layer, one-head, attention-only transformer on the max-of-K
task, then certify its full-distribution accuracy with one of three proof
families: exhaustive counting, a cubic-time convexity argument over pure
sequences, and a quadratic-time gap relaxation parameterised by a
100-point strategy grid.
"""

from .brute import BudgetExceededError, brute_force_bound
from .bounds import (
    EuBounds,
    LowRankDecomp,
    combined_mean_max_row_diff_bound,
    eqke_rank1_decompose,
    eqke_rank2_decompose,
    eu_bound,
    max_row_diff_bound,
    mean_diff_min_bound,
    recursive_max_row_diff_bound,
    summarize_diff_min_bound,
)
from .certificates import Certificate
from .cubic import PureCase, check_swap_sign, cubic_bound, model_behavior, model_behavior_relaxed
from .linalg import (
    DimensionMismatchError,
    FlopTrace,
    SvdConvergenceError,
    factored_top_svd,
    masked_softmax,
    matmul,
    row_diff_range,
    svd,
)
from .metrics import (
    InterpretationStats,
    interpretation_stats,
    normalized_bound,
    rounded_power_of_two,
    unexplained_dimensionality,
)
from .model import (
    ModelParams,
    PathMatrices,
    WeightFileError,
    decompose_paths,
    forward,
    load_model,
    logits_from_paths,
    predict,
    save_model,
)
from .subcubic import (
    GapTable,
    StrategyConfig,
    check_two_token_swap,
    compute_gap_table,
    model_behavior_relaxed_over_gap,
    subcubic_bound,
)
from .training import TrainConfig, TrainResult, adamw_step, loss_and_grads, sample_batch, train

__all__ = [
    "BudgetExceededError",
    "Certificate",
    "DimensionMismatchError",
    "EuBounds",
    "FlopTrace",
    "GapTable",
    "InterpretationStats",
    "LowRankDecomp",
    "ModelParams",
    "PathMatrices",
    "PureCase",
    "StrategyConfig",
    "SvdConvergenceError",
    "TrainConfig",
    "TrainResult",
    "WeightFileError",
    "adamw_step",
    "brute_force_bound",
    "check_swap_sign",
    "check_two_token_swap",
    "combined_mean_max_row_diff_bound",
    "compute_gap_table",
    "cubic_bound",
    "decompose_paths",
    "eqke_rank1_decompose",
    "eqke_rank2_decompose",
    "eu_bound",
    "factored_top_svd",
    "forward",
    "interpretation_stats",
    "load_model",
    "logits_from_paths",
    "masked_softmax",
    "matmul",
    "max_row_diff_bound",
    "mean_diff_min_bound",
    "model_behavior",
    "model_behavior_relaxed",
    "model_behavior_relaxed_over_gap",
    "normalized_bound",
    "predict",
    "recursive_max_row_diff_bound",
    "rounded_power_of_two",
    "row_diff_range",
    "sample_batch",
    "save_model",
    "subcubic_bound",
    "summarize_diff_min_bound",
    "svd",
    "train",
    "unexplained_dimensionality",
    "loss_and_grads",
]
