"""One-layer, one-head, attention-only transformer for the max-of-K task.

The model reads a sequence of n_ctx integer tokens and produces d_vocab
logits at the final (query) position. Besides the raw forward pass, this
module provides the path decomposition into five circuit matrices:

    EU    direct path from the query token to the logits
    EQKE  token part of the pre-softmax attention (stored already / sqrt(d))
    EQKP  positional part of the attention (also / sqrt(d))
    EVOU  token part of the attended-value contribution to the logits
    PVOU  positional part of the same

so that the logits of any sequence recombine exactly (up to rounding) as

    softmax(EQKE[q, tokens] + EQKP[q]) @ (EVOU[tokens] + PVOU) + EU[q].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import FlopTrace, masked_softmax, matmul, softmax

WEIGHT_MAGIC = b"MAXK"
WEIGHT_VERSION = 1


class WeightFileError(ValueError):
    """Raised for missing magic bytes, bad versions, or truncated payloads."""


@dataclass(frozen=True)
class ModelParams:
    """Learned weights. Arrays are frozen after construction."""

    e: np.ndarray  # d_vocab x d_model token embedding
    p: np.ndarray  # n_ctx x d_model positional embedding
    q: np.ndarray  # d_model x d_model
    k: np.ndarray  # d_model x d_model
    v: np.ndarray  # d_model x d_model
    o: np.ndarray  # d_model x d_model
    u: np.ndarray  # d_model x d_vocab unembedding

    def __post_init__(self):
        d_vocab, d_model = self.e.shape
        for name, arr, shape in (
            ("p", self.p, (self.p.shape[0], d_model)),
            ("q", self.q, (d_model, d_model)),
            ("k", self.k, (d_model, d_model)),
            ("v", self.v, (d_model, d_model)),
            ("o", self.o, (d_model, d_model)),
            ("u", self.u, (d_model, d_vocab)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        for name in ("e", "p", "q", "k", "v", "o", "u"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def d_vocab(self) -> int:
        return self.e.shape[0]

    @property
    def d_model(self) -> int:
        return self.e.shape[1]

    @property
    def n_ctx(self) -> int:
        return self.p.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.d_vocab, self.d_model, self.n_ctx)

    def validate(self) -> None:
        for name in ("e", "p", "q", "k", "v", "o", "u"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")
        if self.d_model > self.d_vocab:
            raise ValueError(f"need d_model <= d_vocab, got {self.d_model} > {self.d_vocab}")
        if self.n_ctx < 2:
            raise ValueError(f"need n_ctx >= 2, got {self.n_ctx}")

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ("e", "p", "q", "k", "v", "o", "u")}


def check_tokens(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """Validate a batch (or single sequence) of token ids against the dims."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] != params.n_ctx:
        raise ValueError(f"sequence length {tokens.shape[-1]} != n_ctx {params.n_ctx}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= params.d_vocab:
        raise ValueError("token id out of range")
    return tokens


def forward(params: ModelParams, tokens: np.ndarray, trace: FlopTrace | None = None) -> np.ndarray:
    """Logits at the final position for one sequence.

    Follows the residual-stream formulation: h0 = embed + pos, attention
    scores h0 Q K^T h0^T / sqrt(d) with causal masking, h1 = attn @ (h0 V O)
    + h0, logits = h1[-1] @ U.
    """
    tokens = check_tokens(params, tokens)
    if tokens.ndim != 1:
        raise ValueError("forward takes a single sequence; use forward_batch for batches")
    n_ctx, d_model = params.p.shape
    h0 = params.e[tokens] + params.p
    if trace is not None:
        trace.add(h0.size)
    hq = matmul(h0, params.q, trace)
    hk = matmul(h0, params.k, trace)
    scores = matmul(hq, hk.T, trace) / np.sqrt(d_model)
    if trace is not None:
        trace.add(scores.size)
    attn = np.stack([masked_softmax(scores[i], i, trace) for i in range(n_ctx)])
    hv = matmul(h0, params.v, trace)
    mixed = matmul(matmul(attn, hv, trace), params.o, trace)
    h1 = mixed + h0
    if trace is not None:
        trace.add(h1.size)
    logits = matmul(h1[-1:, :], params.u, trace)[0]
    return logits


def forward_batch(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """Final-position logits for a batch of sequences, shape (batch, d_vocab).

    Only the final attention row feeds the output, so the other rows are
    skipped; results match forward() exactly.
    """
    tokens = check_tokens(params, tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    d_model = params.d_model
    h0 = params.e[tokens] + params.p  # (b, n, d)
    hq = h0[:, -1, :] @ params.q  # (b, d)
    hk = h0 @ params.k  # (b, n, d)
    z = np.einsum("bd,bnd->bn", hq, hk) / np.sqrt(d_model)
    attn = softmax(z, axis=1)
    hv = h0 @ params.v
    mixed = np.einsum("bn,bnd->bd", attn, hv) @ params.o
    h1 = mixed + h0[:, -1, :]
    return h1 @ params.u


def predict(logits: np.ndarray) -> int:
    """Predicted token: argmax with ties broken toward the lowest index."""
    return int(np.argmax(logits))


@dataclass(frozen=True)
class PathMatrices:
    """The five circuit matrices plus the cached rewrites they came from.

    eqke and eqkp are stored already divided by sqrt(d_model), so consumers
    never rescale. pvou rows sum to zero across positions by construction.
    The factored rewrites (query-side embedding e_q, position-averaged
    embedding e_bar, and the raw query/key/unembed maps) are kept so that
    low-rank consumers can work at O(v d) without touching raw weights.
    """

    eu: np.ndarray  # d_vocab x d_vocab
    eqke: np.ndarray  # d_vocab x d_vocab, scaled
    eqkp: np.ndarray  # d_vocab x n_ctx, scaled
    evou: np.ndarray  # d_vocab x d_vocab
    pvou: np.ndarray  # n_ctx x d_vocab
    p_avg: np.ndarray  # d_model
    e_q: np.ndarray  # d_vocab x d_model, embedding + final-position offset
    e_bar: np.ndarray  # d_vocab x d_model, embedding + averaged positions
    w_q: np.ndarray  # d_model x d_model
    w_k: np.ndarray  # d_model x d_model
    w_u: np.ndarray  # d_model x d_vocab

    def __post_init__(self):
        for name in ("eu", "eqke", "eqkp", "evou", "pvou", "p_avg", "e_q", "e_bar", "w_q", "w_k", "w_u"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def d_vocab(self) -> int:
        return self.eu.shape[0]

    @property
    def d_model(self) -> int:
        return self.e_q.shape[1]

    @property
    def n_ctx(self) -> int:
        return self.pvou.shape[0]


def decompose_paths(params: ModelParams, trace: FlopTrace | None = None) -> PathMatrices:
    """Build the five path matrices from raw weights. Deterministic."""
    scale = 1.0 / np.sqrt(params.d_model)
    p_avg = params.p.mean(axis=0)
    e_q = params.e + params.p[-1]  # query-side embedding
    e_bar = params.e + p_avg  # position-averaged key/value-side embedding
    p_hat = params.p - p_avg  # centred positions; rows sum to zero over axis 0
    eq_q = matmul(e_q, params.q, trace)
    ek = matmul(e_bar, params.k, trace)
    eqke = matmul(eq_q, ek.T, trace) * scale
    eqkp = matmul(matmul(eq_q, params.k.T, trace), p_hat.T, trace) * scale
    evou = matmul(matmul(matmul(e_bar, params.v, trace), params.o, trace), params.u, trace)
    pvou = matmul(matmul(matmul(p_hat, params.v, trace), params.o, trace), params.u, trace)
    eu = matmul(e_q, params.u, trace)
    if trace is not None:
        trace.add(eqke.size + eqkp.size)  # the two rescales
    return PathMatrices(
        eu=eu, eqke=eqke, eqkp=eqkp, evou=evou, pvou=pvou, p_avg=p_avg,
        e_q=e_q, e_bar=e_bar, w_q=params.q, w_k=params.k, w_u=params.u,
    )


def attention_rows(paths: PathMatrices, tokens: np.ndarray) -> np.ndarray:
    """Final-position attention distribution per sequence, shape (b, n_ctx)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    tq = tokens[:, -1]
    z = paths.eqke[tq[:, None], tokens] + paths.eqkp[tq]
    attn = softmax(z, axis=1)
    return attn[0] if single else attn


def logits_from_paths(paths: PathMatrices, tokens: np.ndarray) -> np.ndarray:
    """Recombine the path matrices into final-position logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    tq = tokens[:, -1]
    attn = attention_rows(paths, tokens)
    b, n = tokens.shape
    gathered = np.take(paths.evou, tokens.reshape(-1), axis=0).reshape(b, n, -1)
    logits = np.einsum("bn,bnv->bv", attn, gathered) + attn @ paths.pvou
    logits += np.take(paths.eu, tq, axis=0)
    return logits[0] if single else logits


def path_forward_flops(d_vocab: int, d_model: int, n_ctx: int) -> int:
    """Per-sequence cost of the recombined forward pass used by certifiers."""
    n, v = n_ctx, d_vocab
    return 2 * n + 5 * n + (2 * n * v + 2 * n * v) + v  # scores, softmax, mixes, skip add


def save_model(params: ModelParams, path: str | Path, metadata: dict | None = None) -> None:
    """Write the bit-exact binary weight format plus a JSON sidecar.

    Layout: magic "MAXK", u32 version, u32 (d_vocab, d_model, n_ctx), then
    E, P, Q, K, V, O, U as row-major little-endian float64, in that order.
    """
    path = Path(path)
    params.validate()
    blob = bytearray()
    blob += WEIGHT_MAGIC
    blob += struct.pack("<IIII", WEIGHT_VERSION, params.d_vocab, params.d_model, params.n_ctx)
    for arr in params.tensors().values():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(bytes(blob))
    if metadata is not None:
        sidecar_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def load_model(path: str | Path) -> ModelParams:
    """Read a weight file; raises WeightFileError on any malformation."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    header = struct.calcsize("<IIII")
    if len(blob) < 4 + header:
        raise WeightFileError(f"{path}: truncated header")
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic bytes {blob[:4]!r}")
    version, d_vocab, d_model, n_ctx = struct.unpack_from("<IIII", blob, 4)
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    shapes = [
        (d_vocab, d_model),
        (n_ctx, d_model),
        (d_model, d_model),
        (d_model, d_model),
        (d_model, d_model),
        (d_model, d_model),
        (d_model, d_vocab),
    ]
    offset = 4 + header
    arrays = []
    for shape in shapes:
        nbytes = shape[0] * shape[1] * 8
        if offset + nbytes > len(blob):
            raise WeightFileError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=shape[0] * shape[1], offset=offset).reshape(shape).copy())
        offset += nbytes
    if offset != len(blob):
        raise WeightFileError(f"{path}: {len(blob) - offset} trailing bytes")
    params = ModelParams(*arrays)
    try:
        params.validate()
    except ValueError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc
    return params


def load_metadata(path: str | Path) -> dict | None:
    side = sidecar_path(path)
    if not side.exists():
        return None
    return json.loads(side.read_text())
