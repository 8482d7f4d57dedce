"""Reusable pessimisation bounds.

Three families live here:

* lower bounds on decoupled minima (mean+diff and its summary
  generalisation), used to couple tables that share an axis;
* upper bounds on the per-row spread of a matrix product that never
  materialise the product (plain, recursive, and summary-fused forms);
* low-rank splits of the attention score product and of the direct path,
  which pair an exactly-evaluated low-rank part with a cheaply bounded
  high-rank residual.

Every bound returns a value on the safe side of the exact quantity; the
test suite drives each one against brute-force oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionMismatchError, FlopTrace, factored_top_svd, row_diff_range, svd
from .model import PathMatrices


# ---------------------------------------------------------------------------
# min-bounds for sums of tables sharing one axis


def summarize_diff_min_bound(f: np.ndarray, g: np.ndarray, h: np.ndarray) -> float:
    """Lower bound on min_{x,y,z} f[x,y] + g[y,z] through a summary h[y].

    min(h_y + g_yz) + min(f_xy - h_y) never exceeds the true minimum, for
    any h whatsoever; good summaries make it tight.
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if f.ndim != 2 or g.ndim != 2 or f.shape[1] != g.shape[0]:
        raise DimensionMismatchError(f"shared axis disagrees: f {f.shape}, g {g.shape}")
    if h.shape != (f.shape[1],):
        raise DimensionMismatchError(f"summary shape {h.shape} != shared axis {f.shape[1]}")
    if f.size == 0 or g.size == 0:
        raise ValueError("empty axis")
    return float((h[:, None] + g).min() + (f - h[None, :]).min())


def mean_diff_min_bound(f: np.ndarray, g: np.ndarray) -> float:
    """summarize_diff_min_bound with the x-mean of f as the summary."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.size == 0:
        raise ValueError("f must be a non-empty table over (x, y)")
    return summarize_diff_min_bound(f, g, f.mean(axis=0))


# ---------------------------------------------------------------------------
# row-spread bounds for matrix products


def row_max_diff_bounds(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row upper bounds on max_{i,j} ((a @ b)[r, i] - (a @ b)[r, j]).

    Entry r is sum_k |a[r, k]| * spread(b[k, :]); costs O(nm + mp) for
    a of shape n x m and b of shape m x p.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(f"inner dims disagree: {a.shape} @ {b.shape}")
    return np.abs(a) @ row_diff_range(b)


def max_row_diff_bound(a: np.ndarray, b: np.ndarray) -> float:
    """Upper bound on the worst row spread of a @ b, without forming it."""
    return float(row_max_diff_bounds(a, b).max())


def row_recursive_max_diff_bounds(matrices: list[np.ndarray]) -> np.ndarray:
    """Per-row spread bounds for a whole product chain, linear in parameters.

    A single matrix is its own exact per-row spread; longer chains fold
    absolute values right to left.
    """
    if not matrices:
        raise ValueError("empty chain")
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    for left, right in zip(mats, mats[1:]):
        if left.shape[1] != right.shape[0]:
            raise DimensionMismatchError(f"chain break: {left.shape} then {right.shape}")
    acc = row_diff_range(mats[-1])
    for mat in reversed(mats[:-1]):
        acc = np.abs(mat) @ acc
    return acc


def recursive_max_row_diff_bound(matrices: list[np.ndarray]) -> float:
    return float(row_recursive_max_diff_bounds(matrices).max())


def combined_row_bounds(matrices: list[np.ndarray], summaries: list[np.ndarray | None]) -> np.ndarray:
    """Per-row spread bounds with per-level column summaries peeled off.

    summaries has one optional entry per matrix except the last; a None or
    all-zero summary at every level reduces this to the plain recursive
    bound. Each level contributes the exact spread of its summary pushed
    through the rest of the chain, plus the residual |A - h| folded into
    the next level's bound.
    """
    if not matrices:
        raise ValueError("empty chain")
    if len(summaries) != len(matrices) - 1:
        raise ValueError(f"need {len(matrices) - 1} summaries, got {len(summaries)}")
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if len(mats) == 1:
        return row_diff_range(mats[0])
    head, rest = mats[0], mats[1:]
    h = summaries[0]
    h = np.zeros(head.shape[1]) if h is None else np.asarray(h, dtype=np.float64)
    if h.shape != (head.shape[1],):
        raise DimensionMismatchError(f"summary shape {h.shape} != columns {head.shape[1]}")
    pushed = h
    for mat in rest:
        pushed = pushed @ mat
    summary_spread = float(pushed.max() - pushed.min()) if pushed.size else 0.0
    tail = combined_row_bounds(rest, summaries[1:])
    return summary_spread + np.abs(head - h[None, :]) @ tail


def combined_mean_max_row_diff_bound(
    matrices: list[np.ndarray], summaries: list[np.ndarray | None]
) -> float:
    return float(combined_row_bounds(matrices, summaries).max())


def mean_summaries(matrices: list[np.ndarray]) -> list[np.ndarray]:
    """Column means for every matrix except the last."""
    return [np.asarray(m, dtype=np.float64).mean(axis=0) for m in matrices[:-1]]


# ---------------------------------------------------------------------------
# low-rank splits of the attention score product


ERR_SVD = "svd"
ERR_MAX_DIFF = "max_diff"
ERR_MEAN_MAX_DIFF = "mean+max_diff"
ERR_EXACT = "max_diff_exact"
ERR_SUBPRODUCT = "max_diff_subproduct"
ERR_MEAN_SUBPRODUCT = "mean+max_diff_subproduct"
ERR_RECURSIVE = "max_diff_subproduct_recursive"
ERR_MEAN_RECURSIVE = "mean+max_diff_subproduct_recursive"
ERR_MEAN_RECURSIVE_ALL = "mean_recursive+max_diff_subproduct_recursive"


@dataclass(frozen=True)
class LowRankDecomp:
    """An exactly evaluated low-rank part plus a bounded high-rank residual.

    rank_one_terms are (left, right) vector pairs whose outer products sum
    to the exact part. error_bound_per_row bounds, for each row, the spread
    max_{i,j}(residual[r, i] - residual[r, j]); a scalar means one global
    bound. residual_factors multiply out to the exact residual and exist so
    tests can materialise it.
    """

    rank_one_terms: tuple[tuple[np.ndarray, np.ndarray], ...]
    error_bound_per_row: np.ndarray | float
    method_tag: str
    residual_factors: tuple[np.ndarray, ...] = field(default=())

    def exact_part(self) -> np.ndarray:
        rows = self.rank_one_terms[0][0].shape[0]
        cols = self.rank_one_terms[0][1].shape[0]
        out = np.zeros((rows, cols))
        for left, right in self.rank_one_terms:
            out += np.outer(left, right)
        return out

    def residual(self) -> np.ndarray:
        out = self.residual_factors[0]
        for mat in self.residual_factors[1:]:
            out = out @ mat
        return out

    def error_bounds_vector(self, rows: int) -> np.ndarray:
        if np.isscalar(self.error_bound_per_row):
            return np.full(rows, float(self.error_bound_per_row))
        return np.asarray(self.error_bound_per_row, dtype=np.float64)


def _qk_factors(paths: PathMatrices) -> tuple[np.ndarray, np.ndarray]:
    """Left and right v x d factors whose product is the unscaled score table."""
    left = paths.e_q @ paths.w_q
    right = paths.e_bar @ paths.w_k
    return left, right


def eqke_rank1_decompose(
    paths: PathMatrices, err_method: str = ERR_SVD, trace: FlopTrace | None = None
) -> LowRankDecomp:
    """Rank-one split of the unscaled attention score product.

    The top singular triple is computed from the v x d factors, so the
    v x v product is never formed; the residual stays factored as
    (v x (d+1)) @ ((d+1) x v) and its row spread is bounded per err_method:
    a sqrt(2) * sigma_1 cap, a per-row absolute fold, or the latter with
    the column mean peeled first. ERR_EXACT materialises the residual and
    reports its exact row spreads.
    """
    left, right = _qk_factors(paths)
    u1, s1, v1 = factored_top_svd(left, right.T, k=1, trace=trace)
    lead_left = s1[0] * u1[:, 0]
    lead_right = v1[:, 0]
    res_left = np.concatenate([left, u1[:, :1]], axis=1)
    res_right_t = np.concatenate([right, -s1[0] * v1[:, :1]], axis=1)  # residual = res_left @ res_right_t.T
    if err_method == ERR_SVD:
        sigma = factored_top_svd(res_left, res_right_t.T, k=1, trace=trace)[1][0]
        err: np.ndarray | float = float(np.sqrt(2.0) * sigma)
    elif err_method in (ERR_MAX_DIFF, ERR_MEAN_MAX_DIFF):
        # Work in the residual's own singular basis: the raw factors carry
        # large cancelling components that an absolute-value fold would
        # destroy, while the residual's singular values are genuinely small.
        ur, sr, vr = factored_top_svd(res_left, res_right_t.T, k=res_left.shape[1], trace=trace)
        scaled = ur * sr[None, :]
        if err_method == ERR_MAX_DIFF:
            err = row_max_diff_bounds(scaled, vr.T)
        else:
            h = scaled.mean(axis=0)
            pushed = h @ vr.T
            err = float(pushed.max() - pushed.min()) + row_max_diff_bounds(
                scaled - h[None, :], vr.T
            )
        if trace is not None:
            trace.add(4 * scaled.size + 2 * vr.size)
    elif err_method == ERR_EXACT:
        residual = res_left @ res_right_t.T
        err = row_diff_range(residual)
        if trace is not None:
            trace.add(2 * res_left.shape[0] * res_left.shape[1] * res_right_t.shape[0])
    else:
        raise ValueError(f"unknown rank-one error method {err_method!r}")
    return LowRankDecomp(
        rank_one_terms=((lead_left, lead_right),),
        error_bound_per_row=err,
        method_tag=f"rank1:{err_method}",
        residual_factors=(res_left, res_right_t.T),
    )


def _split_components(mat: np.ndarray, count: int, trace: FlopTrace | None):
    """Top `count` singular components as (left, right) pairs plus remainder."""
    u, s, v = svd(mat, trace=trace)
    parts = [(s[i] * u[:, i], v[:, i]) for i in range(count)]
    remainder = mat - sum(np.outer(l, r) for l, r in parts)
    return parts, remainder


def eqke_rank2_decompose(
    paths: PathMatrices, err_method: str = ERR_RECURSIVE, trace: FlopTrace | None = None
) -> LowRankDecomp:
    """Peel two components off each embedding side and one off each of the
    query/key maps; what remains is 35 rank-one products plus a residual
    chain of four structureless factors.

    The residual chain is bounded without multiplying it out, per
    err_method: all two-sided splits of the chain (subproduct forms), the
    fully recursive fold, or either fused with column-mean summaries.
    """
    eq_parts, eq_rem = _split_components(paths.e_q, 2, trace)
    ek_parts, ek_rem = _split_components(paths.e_bar, 2, trace)
    q_parts, q_rem = _split_components(paths.w_q, 1, trace)
    k_parts, k_rem = _split_components(paths.w_k, 1, trace)

    def slot_options(parts, remainder, transpose):
        options = []
        for left_vec, right_vec in parts:
            pair = (right_vec, left_vec) if transpose else (left_vec, right_vec)
            options.append(("lr", pair))
        options.append(("full", remainder.T if transpose else remainder))
        return options

    slots = [
        slot_options(eq_parts, eq_rem, transpose=False),  # v x d
        slot_options(q_parts, q_rem, transpose=False),  # d x d
        slot_options(k_parts, k_rem, transpose=True),  # d x d, transposed in the chain
        slot_options(ek_parts, ek_rem, transpose=True),  # d x v, transposed embedding
    ]

    terms: list[tuple[np.ndarray, np.ndarray]] = []
    import itertools

    for picks in itertools.product(*slots):
        if all(kind == "full" for kind, _ in picks):
            continue  # the residual chain, handled separately
        first_lr = next(i for i, (kind, _) in enumerate(picks) if kind == "lr")
        u_vec, v_vec = picks[first_lr][1]
        left = u_vec
        for kind, payload in reversed(picks[:first_lr]):
            left = payload @ left if kind == "full" else payload[0] * (payload[1] @ left)
        right = v_vec
        for kind, payload in picks[first_lr + 1 :]:
            right = right @ payload if kind == "full" else (right @ payload[0]) * payload[1]
        terms.append((left, right))

    chain = [eq_rem, q_rem, k_rem.T, ek_rem.T]
    if trace is not None:
        trace.add(sum(2 * (l.size + r.size) for l, r in terms))
        trace.add(sum(2 * m.size for m in chain))

    if err_method in (ERR_SUBPRODUCT, ERR_MEAN_SUBPRODUCT):
        candidates = []
        for cut in range(1, len(chain)):
            left = chain[0]
            for mat in chain[1:cut]:
                left = left @ mat
            right = chain[cut]
            for mat in chain[cut + 1 :]:
                right = right @ mat
            if err_method == ERR_SUBPRODUCT:
                candidates.append(row_max_diff_bounds(left, right))
            else:
                h = left.mean(axis=0)
                pushed = h @ right
                candidates.append(
                    float(pushed.max() - pushed.min())
                    + row_max_diff_bounds(left - h[None, :], right)
                )
        err: np.ndarray | float = np.minimum.reduce(candidates)
    elif err_method == ERR_RECURSIVE:
        err = row_recursive_max_diff_bounds(chain)
    elif err_method == ERR_MEAN_RECURSIVE:
        summaries: list[np.ndarray | None] = [chain[0].mean(axis=0), None, None]
        err = combined_row_bounds(chain, summaries)
    elif err_method == ERR_MEAN_RECURSIVE_ALL:
        err = combined_row_bounds(chain, list(mean_summaries(chain)))
    else:
        raise ValueError(f"unknown rank-two error method {err_method!r}")
    return LowRankDecomp(
        rank_one_terms=tuple(terms),
        error_bound_per_row=err,
        method_tag=f"rank2:{err_method}",
        residual_factors=tuple(chain),
    )


# ---------------------------------------------------------------------------
# direct-path (query-to-logit skip connection) bounds


EU_MAX_DIFF = "max_diff"
EU_MEAN_MAX_DIFF = "mean_query+max_diff"
EU_SVD_MAX_DIFF = "svd_query+max_diff"
EU_EXACT = "max_diff_exact"
EU_GLOBAL_EXACT = "global_max_diff_exact"
EU_VARIANTS = (EU_MAX_DIFF, EU_MEAN_MAX_DIFF, EU_SVD_MAX_DIFF, EU_EXACT, EU_GLOBAL_EXACT)


@dataclass(frozen=True)
class EuBounds:
    """Skip-connection spread bounds for every query token.

    per_query[r] bounds the spread of the direct-path logit row for query
    r. query_mean is the query-averaged logit row, and centred_per_query[r]
    bounds the spread of row r after that mean is removed; the pair feeds
    the mean+diff combination.
    """

    variant: str
    per_query: np.ndarray
    query_mean: np.ndarray
    centred_per_query: np.ndarray


def eu_bound(paths: PathMatrices, variant: str, trace: FlopTrace | None = None) -> EuBounds:
    """Per-query spread bounds for the direct path, per variant.

    The exact variants read the materialised table; the others stay in
    O(v d) by folding |E_q| (optionally mean- or top-component-centred)
    against the per-row spreads of the unembedding.
    """
    if variant not in EU_VARIANTS:
        raise ValueError(f"unknown direct-path variant {variant!r}")
    e_q, w_u = paths.e_q, paths.w_u
    v = e_q.shape[0]
    col_mean = e_q.mean(axis=0)
    query_mean = col_mean @ w_u
    if trace is not None:
        trace.add(2 * e_q.size + 2 * w_u.size)
    if variant in (EU_EXACT, EU_GLOBAL_EXACT):
        exact = row_diff_range(paths.eu)
        per = np.full(v, exact.max()) if variant == EU_GLOBAL_EXACT else exact
        centred = row_diff_range(paths.eu - query_mean[None, :])
        if trace is not None:
            trace.add(4 * paths.eu.size)
        return EuBounds(variant, per, query_mean, centred)
    u_spread = row_diff_range(w_u)
    centred = np.abs(e_q - col_mean[None, :]) @ u_spread
    if variant == EU_MAX_DIFF:
        per = np.abs(e_q) @ u_spread
    elif variant == EU_MEAN_MAX_DIFF:
        per = float(query_mean.max() - query_mean.min()) + centred
    else:  # EU_SVD_MAX_DIFF
        u1, s1, v1 = svd(e_q, rank=1, trace=trace)
        lead = s1[0] * u1[:, 0]
        pushed = v1[:, 0] @ w_u
        spread = float(pushed.max() - pushed.min())
        residual = e_q - np.outer(lead, v1[:, 0])
        per = np.abs(lead) * spread + np.abs(residual) @ u_spread
    if trace is not None:
        trace.add(4 * e_q.size)
    return EuBounds(variant, per, query_mean, centred)
