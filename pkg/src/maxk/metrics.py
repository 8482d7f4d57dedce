"""Strategy-level accounting: unexplained dimensionality, bound tightness,
and the interpretation statistics reported alongside every certificate.

Unexplained dimensionality counts the free real scalars a strategy consults
as opaque tables (domain cardinality times output dimension per table). The
inventory below is documented per strategy family; the helper
``rounded_power_of_two`` reports the nearest power of two for cost tables.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .certificates import Certificate
from .linalg import svd
from .model import PathMatrices


def rounded_power_of_two(value: int | float) -> int:
    """Exponent of the nearest power of two in log space."""
    if value <= 0:
        raise ValueError(f"need a positive value, got {value}")
    return round(math.log2(value))


def brute_force_dims(d_vocab: int, n_ctx: int) -> int:
    """The whole model as one opaque map from sequences to logit vectors."""
    return d_vocab**n_ctx * d_vocab


def cubic_dims(d_vocab: int, n_ctx: int) -> int:
    """The five circuit matrices consulted entrywise.

    Three d_vocab x d_vocab tables (scores, copying, direct path) plus the
    two positional tables of d_vocab * n_ctx entries each.
    """
    return 3 * d_vocab * d_vocab + 2 * n_ctx * d_vocab


# Consulted-table inventory for the quadratic strategies. Shared baseline:
# the copying table (v^2), both positional tables (2 n v), and the direct-
# path rows read by the single-sequence constant-max checks (v). On top of
# that, each direct-path variant consults either a per-query spread vector
# (v), that vector plus a query-mean row (2v), or one global scalar; each
# attention variant consults the full score table (v^2), a rank-one pair
# with per-row residual spreads (3v) or exact residual spreads (v^2 + 2v),
# a rank-one pair with one spectral scalar (2v + 1), or the peeled
# components plus residual spreads of the four-factor split (7v). The
# mean+diff combination consults one query-averaged direct-path row (v).
_EU_DIM_TABLE = {
    "max_diff": lambda v: v,
    "mean_query+max_diff": lambda v: 2 * v,
    "svd_query+max_diff": lambda v: 2 * v,
    "max_diff_exact": lambda v: v,
    "global_max_diff_exact": lambda v: 1,
}

_ATTN_DIM_TABLE = {
    "max_diff_exact": lambda v: v * v + 2 * v,
    "exact_EQKE+max_diff_exact": lambda v: v * v,
    "svd": lambda v: 2 * v + 1,
    "max_diff": lambda v: 3 * v,
    "mean+max_diff": lambda v: 3 * v,
    "max_diff_subproduct": lambda v: 7 * v,
    "mean+max_diff_subproduct": lambda v: 7 * v,
    "max_diff_subproduct_recursive": lambda v: 7 * v,
    "mean+max_diff_subproduct_recursive": lambda v: 7 * v,
    "mean_recursive+max_diff_subproduct_recursive": lambda v: 7 * v,
}


def subcubic_dims(strategy, d_vocab: int, n_ctx: int) -> int:
    """Inventory lookup for a quadratic strategy (duck-typed config)."""
    v = d_vocab
    base = v * v + 2 * n_ctx * v + v
    eu = _EU_DIM_TABLE[strategy.eu_variant](v)
    attn = _ATTN_DIM_TABLE[strategy.attn_variant](v)
    combine = v if strategy.combine_mean_diff else 0
    return base + eu + attn + combine


def unexplained_dimensionality(strategy, d_vocab: int, n_ctx: int) -> int:
    """Dispatch on a strategy id string or a strategy config object."""
    if strategy == "brute_force":
        return brute_force_dims(d_vocab, n_ctx)
    if strategy == "cubic":
        return cubic_dims(d_vocab, n_ctx)
    if hasattr(strategy, "eu_variant"):
        return subcubic_dims(strategy, d_vocab, n_ctx)
    raise ValueError(f"unknown strategy {strategy!r}")


def normalized_bound(cert: Certificate, exact: float) -> float:
    """Tightness ratio bound / exact accuracy."""
    if exact <= 0:
        raise ValueError(f"exact accuracy must be positive, got {exact}")
    return cert.bound / exact


@dataclass(frozen=True)
class InterpretationStats:
    """Summary statistics of the learned mechanism.

    sigma_ratio is the top-two singular value ratio of the score table
    (infinite when the second value vanishes); attention_slope the mean
    increase in pre-softmax attention per unit of key token along the top
    singular direction; copy_threshold the smallest token above which every
    copying row is diagonally dominant.
    """

    sigma_ratio: float
    attention_slope: float
    copy_threshold: int
    eqkp_mean_abs: float
    eu_mean_abs: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def interpretation_stats(paths: PathMatrices) -> InterpretationStats:
    u, s, v = svd(paths.eqke)
    if len(s) < 2 or s[1] <= 1e-12 * max(s[0], 1e-300):
        ratio = math.inf
    else:
        ratio = float(s[0] / s[1])
    n_keys = v.shape[0]
    slope = float(s[0] * u[:, 0].mean() * (v[-1, 0] - v[0, 0]) / max(n_keys - 1, 1))
    diag_dominant = paths.evou.argmax(axis=1) == np.arange(paths.d_vocab)
    bad = np.flatnonzero(~diag_dominant)
    threshold = int(bad.max()) + 1 if bad.size else 0
    return InterpretationStats(
        sigma_ratio=ratio,
        attention_slope=slope,
        copy_threshold=threshold,
        eqkp_mean_abs=float(np.abs(paths.eqkp).mean()),
        eu_mean_abs=float(np.abs(paths.eu).mean()),
    )
