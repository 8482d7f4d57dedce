"""Dense float64 matrix kernels with approximate FLOP accounting.

All arithmetic is 64-bit. FLOP convention used throughout the package:
a multiply-add pair counts as 2 FLOPs, elementwise exp/log/division count
as 1 FLOP each, and comparisons inside max/min reductions count as 1 FLOP
per element visited. Counts are approximate by design; they are meant for
order-of-magnitude cost reports, not cycle accounting.
"""

from __future__ import annotations

import numpy as np


class DimensionMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


class SvdConvergenceError(RuntimeError):
    """Raised when Jacobi sweeps fail to converge; carries the residual."""

    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"SVD did not converge after {sweeps} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


class FlopTrace:
    """Monotone FLOP accumulator, confined to one logical task."""

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0

    def add(self, count: int | float) -> None:
        count = int(count)
        if count < 0:
            raise ValueError(f"negative FLOP increment: {count}")
        self.total += count

    def __repr__(self) -> str:
        return f"FlopTrace(total={self.total})"


def matmul(a: np.ndarray, b: np.ndarray, trace: FlopTrace | None = None) -> np.ndarray:
    """Matrix product a @ b, charging 2*m*k*n FLOPs to ``trace``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatchError(
            f"matmul needs 2-d operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(
            f"inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    if trace is not None:
        m, k = a.shape
        n = b.shape[1]
        trace.add(2 * m * k * n)
    return a @ b


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_flops(n: int) -> int:
    """Cost of one stable softmax over n entries (max, sub, exp, sum, div)."""
    return 5 * n


def masked_softmax(v: np.ndarray, query_index: int, trace: FlopTrace | None = None) -> np.ndarray:
    """Causally masked softmax of a score vector.

    Entry i of the result is exp(v_i) normalised over entries j <= query_index,
    and zero for i > query_index. At query_index == len(v) - 1 the mask is
    vacuous and this is the plain softmax. Computed with max-subtraction.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"masked_softmax needs a vector, got shape {v.shape}")
    if not 0 <= query_index < v.shape[0]:
        raise IndexError(f"query_index {query_index} out of range for length {v.shape[0]}")
    out = np.zeros_like(v)
    out[: query_index + 1] = softmax(v[: query_index + 1])
    if trace is not None:
        trace.add(softmax_flops(query_index + 1))
    return out


def row_diff_range(b: np.ndarray) -> np.ndarray:
    """Per-row spread: entry r is max_j b[r, j] - min_j b[r, j]."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise DimensionMismatchError(f"row_diff_range needs a matrix, got shape {b.shape}")
    return b.max(axis=1) - b.min(axis=1)


def _complete_orthonormal(u: np.ndarray, start: int) -> None:
    """Replace columns ``start:`` of u with vectors orthonormal to the rest."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(start)]
    col = start
    for cand in range(m):
        if col >= u.shape[1]:
            break
        vec = np.zeros(m)
        vec[cand] = 1.0
        for seen in basis:
            vec -= (seen @ vec) * seen
        norm = np.linalg.norm(vec)
        if norm > 1e-8:
            vec /= norm
            u[:, col] = vec
            basis.append(vec)
            col += 1
    if col < u.shape[1]:  # cannot happen for start <= m, kept as a guard
        raise SvdConvergenceError(residual=float("nan"), sweeps=0)


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    """Force the largest-magnitude entry of each left singular vector >= 0."""
    for i in range(u.shape[1]):
        j = int(np.argmax(np.abs(u[:, i])))
        if u[j, i] < 0:
            u[:, i] = -u[:, i]
            v[:, i] = -v[:, i]


def _jacobi_tall(m_in: np.ndarray, max_sweeps: int, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on an m x n matrix with m >= n."""
    work = np.array(m_in, dtype=np.float64, copy=True)
    m, n = work.shape
    v = np.eye(n)
    norm_f = np.linalg.norm(work)
    if norm_f == 0.0:
        u = np.zeros((m, n))
        _complete_orthonormal(u, 0)
        return u, np.zeros(n), v
    threshold = tol * norm_f
    off = np.inf
    for sweep in range(max_sweeps):
        off_sq = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                cp = work[:, p]
                cq = work[:, q]
                gamma = cp @ cq
                off_sq += gamma * gamma
                if gamma == 0.0:
                    continue
                alpha = cp @ cp
                beta = cq @ cq
                if abs(gamma) <= 1e-15 * np.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                new_q = s * cp + c * cq
                work[:, p] = new_p
                work[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        off = np.sqrt(off_sq)
        if off < threshold:
            break
    else:
        raise SvdConvergenceError(residual=float(off), sweeps=max_sweeps)
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    rank_end = 0
    for i in range(n):
        if sigma[i] > 1e-14 * norm_f:
            u[:, i] = work[:, i] / sigma[i]
            rank_end = i + 1
        else:
            sigma[i] = 0.0
    _complete_orthonormal(u, rank_end)
    return u, sigma, v


def svd_verification_flops(m: int, n: int, k: int) -> int:
    """Cost of checking an SVD: orthonormality of both bases + reconstruction."""
    return 2 * m * k * k + 2 * n * k * k + m * k + 2 * m * k * n + m * n


def svd(
    mat: np.ndarray,
    rank: int | None = None,
    trace: FlopTrace | None = None,
    max_sweeps: int = 100,
    tol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD via one-sided Jacobi rotations.

    Returns (u, s, v) with mat ~= u @ diag(s) @ v.T, s sorted descending,
    and both bases orthonormal. The sign of each pair (u_i, v_i) is fixed
    so the largest-magnitude entry of u_i is non-negative. The FLOP charge
    is the cost of verifying the decomposition, not of computing it.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionMismatchError(f"svd needs a matrix, got shape {mat.shape}")
    m, n = mat.shape
    if m >= n:
        u, s, v = _jacobi_tall(mat, max_sweeps, tol)
    else:
        v, s, u = _jacobi_tall(mat.T, max_sweeps, tol)
    _fix_signs(u, v)
    k = s.shape[0]
    if rank is not None:
        if rank > k:
            raise DimensionMismatchError(f"rank {rank} exceeds min(m, n) = {k}")
        u, s, v = u[:, :rank], s[:rank], v[:, :rank]
        k = rank
    if trace is not None:
        trace.add(svd_verification_flops(m, n, k))
    return u, s, v


def factored_top_svd(
    a: np.ndarray,
    b: np.ndarray,
    k: int,
    trace: FlopTrace | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k singular triples of a @ b without materialising the product.

    For a of shape m x d and b of shape d x n this costs O((m + n) d^2),
    which matters when m and n are large and d is small.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(f"factored_top_svd: incompatible shapes {a.shape}, {b.shape}")
    d = a.shape[1]
    if k > d:
        raise DimensionMismatchError(f"k = {k} exceeds inner dimension {d}")
    ua, sa, va = svd(a, trace=trace)
    core = sa[:, None] * matmul(va.T, b, trace)  # d x n
    if trace is not None:
        trace.add(core.size)
    uc, sc, vc = svd(core, trace=trace)
    u = matmul(ua, uc, trace)
    u, s, v = u[:, :k], sc[:k], vc[:, :k]
    _fix_signs(u, v)
    return u, s, v
