"""Quadratic-time certification.

The cubic certifier still spends a factor of d_vocab scanning third
tokens. Here that scan is replaced by a gap table: for each (max token,
query token, non-max count) the table names a separation g, and one
relaxed check pessimises every sequence whose non-max tokens sit at least
g below the maximum. Sequences closer to the maximum are surrendered.

The relaxed check decouples aggressively so each piece can be cached in
O(d_vocab^2): the direct path collapses to a per-query spread bound, the
positional paths to their worst entries, the copying values to per-row
spreads over the allowed token range, and the attention advantage of the
max-token block to running extrema of the score row (optionally through a
low-rank approximation whose residual spread is cheaply bounded). Five
direct-path handlings, ten attention handlings, and an optional mean+diff
recoupling of the direct path with the copying values give the 100-point
strategy family.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from math import comb

import numpy as np

from . import bounds
from .certificates import Certificate
from .cubic import SwapReport
from .linalg import FlopTrace, softmax, softmax_flops
from .metrics import subcubic_dims
from .model import ModelParams, PathMatrices, decompose_paths, logits_from_paths

NEG_INF = -np.inf

EU_VARIANTS = bounds.EU_VARIANTS
ATTN_VARIANTS = (
    "max_diff_exact",
    "exact_EQKE+max_diff_exact",
    "svd",
    "max_diff",
    "mean+max_diff",
    "max_diff_subproduct",
    "mean+max_diff_subproduct",
    "max_diff_subproduct_recursive",
    "mean+max_diff_subproduct_recursive",
    "mean_recursive+max_diff_subproduct_recursive",
)
COMBINE_ON_LABEL = "mean_query+diff"
COMBINE_OFF_LABEL = "none"


@dataclass(frozen=True)
class StrategyConfig:
    """One point in the 5 x 10 x 2 quadratic strategy family."""

    eu_variant: str = "max_diff_exact"
    attn_variant: str = "max_diff_exact"
    combine_mean_diff: bool = True

    def __post_init__(self):
        if self.eu_variant not in EU_VARIANTS:
            raise ValueError(f"unknown direct-path variant {self.eu_variant!r}")
        if self.attn_variant not in ATTN_VARIANTS:
            raise ValueError(f"unknown attention variant {self.attn_variant!r}")

    @property
    def strategy_id(self) -> str:
        combine = COMBINE_ON_LABEL if self.combine_mean_diff else COMBINE_OFF_LABEL
        return f"subcubic:eu={self.eu_variant},attn={self.attn_variant},combine={combine}"

    @classmethod
    def from_id(cls, strategy_id: str) -> "StrategyConfig":
        prefix = "subcubic:"
        if not strategy_id.startswith(prefix):
            raise ValueError(f"not a subcubic strategy id: {strategy_id!r}")
        fields = dict(part.split("=", 1) for part in strategy_id[len(prefix) :].split(","))
        try:
            combine = {COMBINE_ON_LABEL: True, COMBINE_OFF_LABEL: False}[fields["combine"]]
            return cls(fields["eu"], fields["attn"], combine)
        except KeyError as exc:
            raise ValueError(f"malformed strategy id {strategy_id!r}") from exc

    @staticmethod
    def all_strategies() -> tuple["StrategyConfig", ...]:
        return tuple(
            StrategyConfig(eu, attn, combine)
            for eu in EU_VARIANTS
            for attn in ATTN_VARIANTS
            for combine in (True, False)
        )


class GapPreconditionError(ValueError):
    """Raised when a relaxed gap evaluation is asked outside its domain."""


@dataclass(frozen=True)
class GapTable:
    """Minimum-separation table g[t_max, t_query, c], clipped on entry.

    g_star[t_max, c] caches the running minimum over query tokens, which
    the shared value-spread cache keys on.
    """

    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.int64)
        if g.ndim != 3 or g.shape[0] != g.shape[1]:
            raise ValueError(f"gap table must be (v, v, n_ctx), got {g.shape}")
        t_max = np.arange(g.shape[0])[:, None, None]
        clipped = np.minimum(t_max, np.maximum(1, g))
        clipped.flags.writeable = False
        object.__setattr__(self, "g", clipped)
        star = np.empty((g.shape[0], g.shape[2]), dtype=np.int64)
        for tm in range(g.shape[0]):
            star[tm] = self.g[tm, : tm + 1].min(axis=0)
        star.flags.writeable = False
        object.__setattr__(self, "g_star", star)

    @property
    def d_vocab(self) -> int:
        return self.g.shape[0]

    @property
    def n_ctx(self) -> int:
        return self.g.shape[2]


class QkDecomps:
    """Per-model cache of the attention-score decompositions.

    The same low-rank split backs several strategies; building it once per
    model keeps strategy sweeps cheap. Each entry remembers the FLOPs its
    standalone construction costs so certificates can charge them even on
    cache hits.
    """

    _RANK1 = {
        "max_diff_exact": bounds.ERR_EXACT,
        "svd": bounds.ERR_SVD,
        "max_diff": bounds.ERR_MAX_DIFF,
        "mean+max_diff": bounds.ERR_MEAN_MAX_DIFF,
    }
    _RANK2 = {
        "max_diff_subproduct": bounds.ERR_SUBPRODUCT,
        "mean+max_diff_subproduct": bounds.ERR_MEAN_SUBPRODUCT,
        "max_diff_subproduct_recursive": bounds.ERR_RECURSIVE,
        "mean+max_diff_subproduct_recursive": bounds.ERR_MEAN_RECURSIVE,
        "mean_recursive+max_diff_subproduct_recursive": bounds.ERR_MEAN_RECURSIVE_ALL,
    }

    def __init__(self, paths: PathMatrices):
        self.paths = paths
        self._cache: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def attention_tables(self, attn_variant: str) -> tuple[np.ndarray, np.ndarray, int]:
        """(scores, per-query residual spread, build flops), all 1/sqrt(d)-scaled."""
        if attn_variant in self._cache:
            return self._cache[attn_variant]
        paths = self.paths
        v = paths.d_vocab
        scale = 1.0 / np.sqrt(paths.d_model)
        trace = FlopTrace()
        if attn_variant == "exact_EQKE+max_diff_exact":
            entry = (paths.eqke, np.zeros(v), 0)
        else:
            if attn_variant in self._RANK1:
                decomp = bounds.eqke_rank1_decompose(paths, self._RANK1[attn_variant], trace)
            elif attn_variant in self._RANK2:
                decomp = bounds.eqke_rank2_decompose(paths, self._RANK2[attn_variant], trace)
            else:
                raise ValueError(f"unknown attention variant {attn_variant!r}")
            scores = decomp.exact_part() * scale
            scores.flags.writeable = False
            entry = (scores, decomp.error_bounds_vector(v) * scale, trace.total)
        self._cache[attn_variant] = entry
        return entry


class SubcubicEvaluator:
    """Per-(model, strategy) caches and the relaxed gap evaluation."""

    def __init__(
        self,
        paths: PathMatrices,
        strategy: StrategyConfig = StrategyConfig(),
        decomps: QkDecomps | None = None,
        trace: FlopTrace | None = None,
    ):
        self.paths = paths
        self.strategy = strategy
        v = paths.d_vocab
        n = paths.n_ctx
        self.n_ctx = n
        eu, evou, pvou = paths.eu, paths.evou, paths.pvou

        self.dw_max = np.empty((v, v))
        self.c0_values = np.empty(v)
        self.dv_tm_max = np.empty(v)
        self.dv_tm_negmin = np.empty(v)
        self.dw_max_max = np.empty(v)
        eu_diag = eu[np.arange(v), np.arange(v)]
        evou_diag = evou[np.arange(v), np.arange(v)]
        for tm in range(v):
            self.dw_max[tm] = (pvou - pvou[:, tm][:, None]).max(axis=0)
            dv_tm = evou[tm] - evou_diag[tm]
            coupled = eu[tm] - eu_diag[tm] + dv_tm + self.dw_max[tm]
            coupled[tm] = NEG_INF
            self.c0_values[tm] = coupled.max()
            masked_dv = dv_tm.copy()
            masked_dv[tm] = NEG_INF
            self.dv_tm_max[tm] = masked_dv.max()
            masked_dv[tm] = np.inf
            self.dv_tm_negmin[tm] = -masked_dv.min()
            masked_dw = self.dw_max[tm].copy()
            masked_dw[tm] = NEG_INF
            self.dw_max_max[tm] = masked_dw.max()
        self.dv_spread_prefix = np.maximum.accumulate(
            evou.max(axis=1) - evou.min(axis=1)
        )
        self.b_sorted = np.sort(paths.eqkp[:, : n - 1], axis=1)
        self.b_query = paths.eqkp[:, n - 1]

        decomps = decomps or QkDecomps(paths)
        self.scores, self.score_err, decomp_flops = decomps.attention_tables(strategy.attn_variant)
        self.a_min_run = np.minimum.accumulate(self.scores, axis=1)
        self.a_max_run = np.maximum.accumulate(self.scores, axis=1)

        eu_trace = FlopTrace()
        eu_info = bounds.eu_bound(paths, strategy.eu_variant, eu_trace)
        self.skip_bound = eu_info.per_query
        self.skip_centred = eu_info.centred_per_query
        if strategy.combine_mean_diff:
            # Couple the query-averaged direct path, the positional worst
            # case, and the max-token copying row through one shared output
            # token, tabulated on a grid of attention mass so each cell
            # evaluation stays O(1). Entry [tm, k] is the worst coupled sum
            # at attention k / grid; between grid points the max-token
            # spread term interpolates soundly.
            euhat = eu_info.query_mean
            self.attn_grid = np.linspace(0.0, 1.0, v + 1)
            self.coupled_grid = np.empty((v, v + 1))
            for tm in range(v):
                fixed = euhat - euhat[tm] + self.dw_max[tm]
                dv_tm = evou[tm] - evou_diag[tm]
                rows = fixed[None, :] + self.attn_grid[:, None] * dv_tm[None, :]
                rows[:, tm] = NEG_INF
                self.coupled_grid[tm] = rows.max(axis=1)
        else:
            self.coupled_grid = None
        if trace is not None:
            # per-t_max rows of the positional, copying and direct tables,
            # plus the attention-grid table when the coupling is on
            trace.add(10 * v * v + 2 * v * n + 4 * v * v)
            if strategy.combine_mean_diff:
                trace.add(3 * v * v * (v + 1))
            trace.add(decomp_flops + eu_trace.total)

    def constant_max_value(self, t_max: int) -> float:
        """Exact three-term check for the all-max sequence (positions
        pessimised)."""
        return float(self.c0_values[t_max])

    def relaxed_values(
        self,
        t_max: np.ndarray,
        t_query: np.ndarray,
        c: np.ndarray,
        g: np.ndarray,
        g_star: np.ndarray,
        trace: FlopTrace | None = None,
    ) -> np.ndarray:
        """Relaxed worst logit gap for a batch of (t_max, t_query, c, g, g*)
        cells; dominates every compatible sequence's true worst gap."""
        t_max = np.asarray(t_max, dtype=np.int64)
        t_query = np.asarray(t_query, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        g = np.asarray(g, dtype=np.int64)
        g_star = np.asarray(g_star, dtype=np.int64)
        if np.any((g_star < 0) | (g_star > g) | (g > t_max)):
            raise GapPreconditionError("need 0 <= g_star <= g <= t_max")
        if np.any((c == 0) & (t_query != t_max)):
            raise GapPreconditionError("c == 0 requires t_query == t_max")
        if np.any((c < 0) | (c >= self.n_ctx) | (t_query > t_max)):
            raise GapPreconditionError("cell outside the case lattice")
        out = np.empty(len(t_max))
        zero = c == 0
        out[zero] = self.c0_values[t_max[zero]]
        rest = ~zero
        if np.any(rest):
            out[rest] = self._gap_values(
                t_max[rest], t_query[rest], c[rest], g[rest], g_star[rest], trace
            )
        return out

    def _gap_values(self, tm, tq, c, g, g_star, trace=None):
        n = self.n_ctx
        m = len(tm)
        dv_non = self.dv_spread_prefix[tm - g_star]
        err = self.score_err[tq]
        advantage = self.scores[tq, tm]
        da_min = advantage - self.a_max_run[tq, tm - g] - err
        da_max = advantage - self.a_min_run[tq, tm - g] + err
        b_asc = self.b_sorted[tq]
        mask = np.zeros((m, n), dtype=bool)
        cols = np.arange(n - 1)[None, :]
        query_is_max = tq == tm
        lim = np.where(query_is_max, n - c - 1, n - c)
        mask[:, : n - 1] = cols < lim[:, None]
        mask[:, n - 1] = query_is_max
        z_lo = np.concatenate([b_asc, self.b_query[tq][:, None]], axis=1)
        z_hi = np.concatenate([b_asc[:, ::-1], self.b_query[tq][:, None]], axis=1)
        z_lo = z_lo + np.where(mask, da_min[:, None], 0.0)
        z_hi = z_hi + np.where(mask, da_max[:, None], 0.0)
        attn_lo = (softmax(z_lo, axis=1) * mask).sum(axis=1)
        attn_hi = (softmax(z_hi, axis=1) * mask).sum(axis=1)
        if trace is not None:
            trace.add(m * (2 * softmax_flops(n) + 4 * n + 12))
        if self.strategy.combine_mean_diff:
            # the coupled maximum is convex in the attention mass, so the
            # true value over [attn_lo, attn_hi] peaks at an endpoint
            v = self.paths.d_vocab

            def coupled_at(attn):
                cell = np.floor(attn * v).astype(np.int64)
                cell = np.minimum(cell, v)
                slack = attn - self.attn_grid[cell]
                return (
                    self.coupled_grid[tm, cell]
                    + slack * self.dv_tm_max[tm]
                    + (1.0 - attn) * dv_non
                )

            base = self.skip_centred[tq]
            lo = base + coupled_at(attn_lo)
            hi = base + coupled_at(attn_hi)
        else:
            base = self.skip_bound[tq] + self.dw_max_max[tm]
            lo = base + attn_lo * self.dv_tm_max[tm] + (1.0 - attn_lo) * dv_non
            hi = base + attn_hi * self.dv_tm_max[tm] + (1.0 - attn_hi) * dv_non
        return np.maximum(lo, hi)


def model_behavior_relaxed_over_gap(
    paths: PathMatrices,
    t_max: int,
    t_query: int,
    c: int,
    g: int,
    g_star: int,
    strategy: StrategyConfig = StrategyConfig(),
) -> float:
    """Single-cell convenience wrapper around SubcubicEvaluator."""
    evaluator = SubcubicEvaluator(paths, strategy)
    return float(
        evaluator.relaxed_values(
            np.array([t_max]), np.array([t_query]), np.array([c]),
            np.array([g]), np.array([g_star]),
        )[0]
    )


def _cell_lattice(v: int, n: int):
    """All (t_max, t_query, c) visited by the counting loop, in loop order.

    c counts every non-max position including the query, so it runs to
    n - 1 whether or not the query is the max; the per-cell weights
    (n-1 choose c') t_max^c' then tile the whole input space exactly.
    """
    for tm in range(v):
        for tq in range(tm + 1):
            c_min = 0 if tq == tm else 1
            c_max = 0 if tm == 0 else n - 1
            for c in range(c_min, c_max + 1):
                yield tm, tq, c


def compute_gap_table(
    paths: PathMatrices,
    mode: str = "relaxed-search",
    strategy: StrategyConfig = StrategyConfig(),
    decomps: QkDecomps | None = None,
    max_repair: int = 8,
) -> GapTable:
    """Fill the minimum-separation table.

    relaxed-search walks g upward per cell using the certifier's own
    relaxed predicate (first with g* = g, then repaired to the table's
    running minima, entries only ever growing); a cell with no passing g
    records t_max and is surrendered at counting time. exhaustive mode
    enumerates every compatible sequence directly and exists for tests;
    at production sizes it costs more than brute force.
    """
    v, n = paths.d_vocab, paths.n_ctx
    table = np.empty((v, v, n), dtype=np.int64)
    t_max_col = np.arange(v)[:, None, None]
    table[:] = np.maximum(t_max_col, 1)
    if mode == "exhaustive":
        for tm, tq, c in _cell_lattice(v, n):
            table[tm, tq, c] = _exhaustive_min_gap(paths, tm, tq, c)
        return GapTable(table)
    if mode != "relaxed-search":
        raise ValueError(f"unknown gap table mode {mode!r}")
    evaluator = SubcubicEvaluator(paths, strategy, decomps)

    def scan(cells, g_star_of=None):
        """First passing g per cell, scanning each cell's candidate range."""
        rows_tm, rows_tq, rows_c, rows_g = [], [], [], []
        spans = []
        for tm, tq, c, g_from in cells:
            cap = tm if tq == tm else min(tm, tm - tq)
            lo = max(1, g_from)
            spans.append((tm, tq, c, lo, cap))
            for g in range(lo, cap + 1):
                rows_tm.append(tm)
                rows_tq.append(tq)
                rows_c.append(c)
                rows_g.append(g)
        if rows_tm:
            tm_arr = np.array(rows_tm)
            g_arr = np.array(rows_g)
            if g_star_of is None:
                gs_arr = g_arr
            else:
                gs_arr = np.minimum(g_arr, g_star_of[tm_arr, np.array(rows_c)])
            passed = (
                evaluator.relaxed_values(tm_arr, np.array(rows_tq), np.array(rows_c), g_arr, gs_arr)
                < 0
            )
        else:
            passed = np.empty(0, dtype=bool)
        idx = 0
        results = {}
        for tm, tq, c, lo, cap in spans:
            width = cap - lo + 1 if cap >= lo else 0
            hits = np.flatnonzero(passed[idx : idx + width]) if width else np.empty(0, dtype=int)
            results[(tm, tq, c)] = lo + int(hits[0]) if hits.size else tm
            idx += width
        return results

    initial = scan([(tm, tq, c, 1) for tm, tq, c in _cell_lattice(v, n) if c > 0])
    for key, val in initial.items():
        table[key] = val
    gaps = GapTable(table)
    for _ in range(max_repair):
        tm_arr, tq_arr, c_arr = [], [], []
        for tm, tq, c in _cell_lattice(v, n):
            if c > 0 and gaps.g[tm, tq, c] < tm:
                tm_arr.append(tm)
                tq_arr.append(tq)
                c_arr.append(c)
        if not tm_arr:
            break
        tm_arr = np.array(tm_arr)
        tq_arr = np.array(tq_arr)
        c_arr = np.array(c_arr)
        g_arr = gaps.g[tm_arr, tq_arr, c_arr]
        gs_arr = gaps.g_star[tm_arr, c_arr]
        ok = evaluator.relaxed_values(tm_arr, tq_arr, c_arr, g_arr, gs_arr) < 0
        if ok.all():
            break
        failing = np.flatnonzero(~ok)
        rescans = scan(
            [(int(tm_arr[i]), int(tq_arr[i]), int(c_arr[i]), int(g_arr[i]) + 1) for i in failing],
            g_star_of=gaps.g_star,
        )
        fresh = gaps.g.copy()
        for key, val in rescans.items():
            fresh[key] = val
        gaps = GapTable(fresh)
    return gaps


def _exhaustive_min_gap(paths: PathMatrices, tm: int, tq: int, c: int) -> int:
    """Smallest g whose whole compatible set is predicted correctly."""
    for g in range(1, tm + 1):
        if all(
            int(np.argmax(logits_from_paths(paths, seq))) == tm
            for seq in compatible_sequences(paths.d_vocab, paths.n_ctx, tm, tq, c, g)
        ):
            return g
    return max(tm, 1) if tm > 0 else 0


def compatible_sequences(v: int, n: int, tm: int, tq: int, c: int, g: int):
    """Every sequence with the given query, max, non-max count, and gap."""
    non_max_total = c
    if tq != tm:
        if tm - tq < g:
            return
        non_max_total -= 1
        if non_max_total < 0:
            return
    free = n - 1
    allowed = [t for t in range(0, tm - g + 1) if t != tm]
    for positions in itertools.combinations(range(free), non_max_total):
        for values in itertools.product(allowed, repeat=non_max_total):
            seq = np.full(n, tm, dtype=np.int64)
            seq[n - 1] = tq
            for pos, val in zip(positions, values):
                seq[pos] = val
            yield seq


def subcubic_bound(
    params: ModelParams,
    strategy: StrategyConfig = StrategyConfig(),
    gap_table: GapTable | None = None,
    decomps: QkDecomps | None = None,
) -> Certificate:
    """Count the sequences certified by the gap relaxation.

    The gap table itself is an input: any table gives a sound bound since
    every cell is re-checked here, so its construction cost is not part of
    the certificate. Dominant certificate cost is the O(v^2) cache build
    plus O(v^2 n_ctx) relaxed checks of O(n_ctx) apiece.
    """
    params.validate()
    v, _, n = params.dims
    started = time.perf_counter()
    trace = FlopTrace()
    paths = decompose_paths(params, trace)
    decomps = decomps or QkDecomps(paths)
    evaluator = SubcubicEvaluator(paths, strategy, decomps, trace)
    if gap_table is None:
        gap_table = compute_gap_table(paths, "relaxed-search", strategy, decomps)
    if gap_table.d_vocab != v or gap_table.n_ctx != n:
        raise ValueError("gap table dims do not match the model")
    trace.add(2 * v * v * n)  # clip and running minima of the table

    cells = [
        (tm, tq, c)
        for tm, tq, c in _cell_lattice(v, n)
        if tq == tm or tm - tq >= gap_table.g[tm, tq, c]  # query-gap check
    ]
    tm_arr = np.array([cell[0] for cell in cells])
    tq_arr = np.array([cell[1] for cell in cells])
    c_arr = np.array([cell[2] for cell in cells])
    g_arr = gap_table.g[tm_arr, tq_arr, c_arr]
    gs_arr = np.minimum(gap_table.g_star[tm_arr, c_arr], g_arr)
    passed = evaluator.relaxed_values(tm_arr, tq_arr, c_arr, g_arr, gs_arr, trace) < 0
    count = 0
    for ok, tm, tq, c, g in zip(passed, tm_arr, tq_arr, c_arr, g_arr):
        if not ok:
            continue
        c_prime = int(c) if tq == tm else int(c) - 1
        count += comb(n - 1, c_prime) * int(tm - g) ** c_prime  # 0**0 == 1
    elapsed = time.perf_counter() - started
    total = v**n
    return Certificate(
        strategy_id=strategy.strategy_id,
        bound=count / total,
        flops=trace.total,
        unexplained_dims=subcubic_dims(strategy, v, n),
        wall_seconds=elapsed,
        detail={"certified_count": count, "total_sequences": total},
    )


def check_two_token_swap(values, attn, pos_attn, assignment, i, j) -> SwapReport:
    """Swap characterisation for two-token sequences: the sign of the score
    change is -sign(b_i - b_j) * sign(v at i - v at j), regardless of the
    attention values."""
    assignment = np.asarray(assignment, dtype=np.int64)
    distinct = set(assignment.tolist())
    if len(distinct) > 2:
        raise ValueError(f"assignment uses {len(distinct)} token values, need at most 2")
    values = np.asarray(values, dtype=np.float64)
    attn = np.asarray(attn, dtype=np.float64)
    pos_attn = np.asarray(pos_attn, dtype=np.float64)

    def score(t):
        weights = np.exp(attn[t] + pos_attn)
        return float((values[t] * weights).sum() / weights.sum())

    swapped = assignment.copy()
    swapped[[i, j]] = swapped[[j, i]]
    delta = score(swapped) - score(assignment)
    tol = 1e-12 * (1.0 + abs(score(assignment)))
    direct = 0 if abs(delta) <= tol else int(np.sign(delta))
    closed = int(
        -np.sign(pos_attn[i] - pos_attn[j])
        * np.sign(values[assignment[i]] - values[assignment[j]])
    )
    return SwapReport(closed_form_sign=closed, direct_sign=direct, delta=delta)
