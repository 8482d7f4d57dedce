"""From-scratch training on uniform max-of-K data.

Sampling, initialisation, and batching all draw from a Philox 4x64
counter-based generator keyed by the config seed, so a given seed produces
the same run on every platform. Gradients are derived by hand and checked
against finite differences in the test suite; the optimiser is AdamW with
decoupled weight decay applied before the moment update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, forward_batch, save_model

TENSOR_NAMES = ("e", "p", "q", "k", "v", "o", "u")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite at step {step}: {loss}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    d_vocab: int = 64
    d_model: int = 32
    n_ctx: int = 4

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def make_rng(seed: int) -> np.random.Generator:
    """Philox-keyed generator; counter-based, so streams are portable."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def init_params(rng: np.random.Generator, d_vocab: int, d_model: int, n_ctx: int) -> ModelParams:
    """Gaussian init, standard deviation 1/sqrt(d_model) for every tensor."""
    scale = 1.0 / np.sqrt(d_model)
    shapes = {
        "e": (d_vocab, d_model),
        "p": (n_ctx, d_model),
        "q": (d_model, d_model),
        "k": (d_model, d_model),
        "v": (d_model, d_model),
        "o": (d_model, d_model),
        "u": (d_model, d_vocab),
    }
    tensors = {name: scale * rng.standard_normal(shape) for name, shape in shapes.items()}
    return ModelParams(**tensors)


def sample_batch(
    rng: np.random.Generator, batch_size: int, d_vocab: int, n_ctx: int
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform i.i.d. token sequences and their per-sequence max labels."""
    tokens = rng.integers(0, d_vocab, size=(batch_size, n_ctx), dtype=np.int64)
    return tokens, tokens.max(axis=1)


def loss_and_grads(
    params: ModelParams, tokens: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy at the final position and its exact gradients."""
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("need a non-empty (batch, n_ctx) token array")
    b = tokens.shape[0]
    d = params.d_model
    sqrt_d = np.sqrt(d)

    h0 = params.e[tokens] + params.p  # (b, n, d)
    h0_last = h0[:, -1, :]
    hq = h0_last @ params.q  # (b, d)
    hk = h0 @ params.k  # (b, n, d)
    z = np.einsum("bd,bnd->bn", hq, hk) / sqrt_d
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    attn = ez / ez.sum(axis=1, keepdims=True)  # (b, n)
    hv = h0 @ params.v  # (b, n, d)
    vo = hv @ params.o  # (b, n, d)
    mixed = np.einsum("bn,bnd->bd", attn, vo)
    h1 = mixed + h0_last
    logits = h1 @ params.u  # (b, v)

    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(b), labels]
    loss = float(losses.mean())

    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b

    grads = {}
    grads["u"] = h1.T @ dlogits
    dh1 = dlogits @ params.u.T  # (b, d)
    dmixed = dh1
    dh0_last = dh1.copy()  # skip connection

    dattn = np.einsum("bd,bnd->bn", dmixed, vo)
    dvo = attn[:, :, None] * dmixed[:, None, :]
    dz = attn * (dattn - (attn * dattn).sum(axis=1, keepdims=True))

    dhq = np.einsum("bn,bnd->bd", dz, hk) / sqrt_d
    dhk = dz[:, :, None] * hq[:, None, :] / sqrt_d
    grads["q"] = h0_last.T @ dhq
    dh0_last += dhq @ params.q.T
    grads["k"] = np.einsum("bnd,bne->de", h0, dhk)
    dh0 = dhk @ params.k.T  # (b, n, d)

    grads["o"] = np.einsum("bnd,bne->de", hv, dvo)
    dhv = dvo @ params.o.T
    grads["v"] = np.einsum("bnd,bne->de", h0, dhv)
    dh0 += dhv @ params.v.T

    dh0[:, -1, :] += dh0_last
    grads["p"] = dh0.sum(axis=0)
    de = np.zeros_like(params.e)
    np.add.at(de, tokens.reshape(-1), dh0.reshape(-1, d))
    grads["e"] = de
    return loss, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(t) for k, t in params.tensors().items()},
            v={k: np.zeros_like(t) for k, t in params.tensors().items()},
        )


def adamw_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """Bias-corrected AdamW; decay shrinks weights before the moment update."""
    t = state.step + 1
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    new_tensors = {}
    new_m = {}
    new_v = {}
    for name, w in params.tensors().items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {w.shape} for {name}")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        w = w * (1.0 - config.lr * config.weight_decay)
        w = w - config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        new_tensors[name] = w
        new_m[name] = m
        new_v[name] = v
    return ModelParams(**new_tensors), AdamState(step=t, m=new_m, v=new_v)


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    accuracies: list[float]
    config: TrainConfig

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def tail_mean_loss(self, window: int = 500) -> float:
        return float(np.mean(self.losses[-window:]))

    def tail_mean_accuracy(self, window: int = 500) -> float:
        return float(np.mean(self.accuracies[-window:]))

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "rng": "philox4x64 keyed by seed",
            "final_train_loss": self.final_loss,
            "tail_mean_train_loss": self.tail_mean_loss(),
            "tail_mean_train_accuracy": self.tail_mean_accuracy(),
        }


def train(config: TrainConfig, out_path: str | Path | None = None) -> TrainResult:
    """Run the full recipe; deterministic given the seed.

    Writes the weight file and metadata sidecar when out_path is given.
    Aborts with TrainingDivergedError if the loss goes non-finite.
    """
    rng = make_rng(config.seed)
    params = init_params(rng, config.d_vocab, config.d_model, config.n_ctx)
    state = AdamState.zeros_like(params)
    losses: list[float] = []
    accuracies: list[float] = []
    for step in range(config.steps):
        tokens, labels = sample_batch(rng, config.batch_size, config.d_vocab, config.n_ctx)
        loss, grads = loss_and_grads(params, tokens, labels)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        losses.append(loss)
        preds = forward_batch(params, tokens).argmax(axis=1)
        accuracies.append(float((preds == labels).mean()))
        params, state = adamw_step(params, grads, state, config)
    result = TrainResult(params=params, losses=losses, accuracies=accuracies, config=config)
    if out_path is not None:
        save_model(params, out_path, metadata=result.metadata())
    return result
