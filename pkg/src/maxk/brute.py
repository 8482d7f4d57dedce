"""Exact accuracy by exhaustive evaluation.

Counts, in integers, the sequences whose predicted token equals the true
maximum, sweeping the whole d_vocab^n_ctx input space in lexicographic
order. Serves both as the strongest certificate (the bound is the exact
accuracy) and as the soundness oracle every other strategy is tested
against. Embarrassingly parallel over index ranges; the integer merge is
order-independent.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .certificates import Certificate
from .linalg import FlopTrace
from .metrics import brute_force_dims
from .model import ModelParams, decompose_paths, forward, logits_from_paths

DEFAULT_BUDGET = 2**28
DEFAULT_CHUNK = 16384


class BudgetExceededError(RuntimeError):
    def __init__(self, sequences: int, budget: int, estimated_flops: int):
        super().__init__(
            f"{sequences} sequences exceed the enumeration budget {budget} "
            f"(estimated {estimated_flops} FLOPs); raise the budget to force the run"
        )
        self.sequences = sequences
        self.budget = budget
        self.estimated_flops = estimated_flops


def sequences_from_indices(indices: np.ndarray, d_vocab: int, n_ctx: int) -> np.ndarray:
    """Decode lexicographic ranks into token arrays (first token varies slowest)."""
    powers = d_vocab ** np.arange(n_ctx - 1, -1, -1, dtype=np.int64)
    return (indices[:, None] // powers[None, :]) % d_vocab


def _count_range(paths, start: int, stop: int, d_vocab: int, n_ctx: int) -> int:
    tokens = sequences_from_indices(np.arange(start, stop, dtype=np.int64), d_vocab, n_ctx)
    logits = logits_from_paths(paths, tokens)
    preds = logits.argmax(axis=1)
    return int((preds == tokens.max(axis=1)).sum())


def single_forward_flops(params: ModelParams) -> int:
    """Traced cost of one raw forward pass; input-independent."""
    trace = FlopTrace()
    forward(params, np.zeros(params.n_ctx, dtype=np.int64), trace)
    return trace.total


def brute_force_bound(
    params: ModelParams,
    threads: int | None = None,
    budget: int = DEFAULT_BUDGET,
    chunk_size: int = DEFAULT_CHUNK,
) -> Certificate:
    """Exact accuracy certificate over the full input distribution.

    Refuses (with the estimated cost) when d_vocab^n_ctx exceeds budget.
    The reported FLOPs are the traced cost of one forward pass times the
    number of sequences.
    """
    params.validate()
    v, _, n = params.dims
    total = v**n
    per_sequence = single_forward_flops(params)
    if total > budget:
        raise BudgetExceededError(total, budget, total * per_sequence)
    started = time.perf_counter()
    paths = decompose_paths(params)
    starts = list(range(0, total, chunk_size))
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(
                pool.map(lambda s: _count_range(paths, s, min(s + chunk_size, total), v, n), starts)
            )
    else:
        counts = [_count_range(paths, s, min(s + chunk_size, total), v, n) for s in starts]
    correct = sum(counts)  # integer counts merge in index order
    elapsed = time.perf_counter() - started
    return Certificate(
        strategy_id="brute_force",
        bound=correct / total,
        flops=per_sequence * total,
        unexplained_dims=brute_force_dims(v, n),
        wall_seconds=elapsed,
        detail={"correct_count": correct, "total_sequences": total},
    )
