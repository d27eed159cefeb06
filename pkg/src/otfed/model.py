"""Multinomial logistic regression trained with minibatch SGD.

The flat parameter vector (row-major weights, then bias) is the unit the
federation exchanges; the layout and byte serialization are part of the
contract and must stay bit-stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .datasets import Dataset

_MAGIC_FIELDS = "<qqq"  # d, k, flat length, little-endian int64


@dataclass
class ModelParams:
    """Weights (d, k) and bias (k,) of a linear softmax classifier."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {W.shape}")
        if b.shape != (W.shape[1],):
            raise ValueError(f"bias shape {b.shape} != ({W.shape[1]},)")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("parameters contain non-finite entries")
        W.setflags(write=False)
        b.setflags(write=False)
        self.weights = W
        self.bias = b

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    l2_penalty: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.l2_penalty < 0:
            raise ValueError(f"l2_penalty must be >= 0, got {self.l2_penalty}")


def init_params(d: int, k: int) -> ModelParams:
    """Zero initialization; the objective is convex, so this is canonical."""
    if d < 1 or k < 2:
        raise ValueError(f"need d >= 1 and k >= 2, got d={d}, k={k}")
    return ModelParams(np.zeros((d, k)), np.zeros(k))


def _logits(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return X @ params.weights + params.bias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(params: ModelParams, data: Dataset, l2_penalty: float = 0.0) -> float:
    """Mean negative log-likelihood plus l2_penalty * ||W||^2 / 2."""
    if data.labels is None:
        raise ValueError("cross_entropy needs labels")
    z = _logits(params, data.features)
    nll = logsumexp(z, axis=1) - z[np.arange(data.n), data.labels]
    return float(nll.mean() + 0.5 * l2_penalty * np.sum(params.weights**2))


def gradient(params: ModelParams, X, labels, l2_penalty: float = 0.0) -> np.ndarray:
    """Flat gradient of the batch cross-entropy, in flatten() layout.

    The bias block carries no l2 term.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    B = X.shape[0]
    P = softmax(_logits(params, X))
    P[np.arange(B), labels] -= 1.0
    grad_W = X.T @ P / B + l2_penalty * params.weights
    grad_b = P.mean(axis=0)
    return np.concatenate([grad_W.ravel(), grad_b])


def train_sgd(params: ModelParams, data: Dataset, cfg: TrainConfig) -> ModelParams:
    """Minibatch SGD from `params`; shuffling is a pure function of
    (cfg.seed, epoch). Returns new parameters, input untouched."""
    if data.labels is None:
        raise ValueError("training needs a labeled dataset")
    if data.dim != params.d:
        raise ValueError(f"feature dim {data.dim} != model dim {params.d}")
    if int(data.labels.max()) >= params.k:
        raise ValueError(f"label {int(data.labels.max())} out of range for k={params.k}")
    W = params.weights.copy()
    b = params.bias.copy()
    X, y = data.features, data.labels
    n = data.n
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            Xb, yb = X[idx], y[idx]
            P = softmax(Xb @ W + b)
            P[np.arange(len(idx)), yb] -= 1.0
            W -= cfg.learning_rate * (Xb.T @ P / len(idx) + cfg.l2_penalty * W)
            b -= cfg.learning_rate * P.mean(axis=0)
    return ModelParams(W, b)


def predict(params: ModelParams, X) -> np.ndarray:
    """Argmax of the logits; ties resolve to the lowest class index."""
    X = np.asarray(X, dtype=np.float64)
    return np.argmax(_logits(params, X), axis=1)


def accuracy(params: ModelParams, data: Dataset) -> float:
    if data.labels is None:
        raise ValueError("accuracy needs labels")
    return float(np.mean(predict(params, data.features) == data.labels))


def flatten(params: ModelParams) -> np.ndarray:
    """Row-major weights, then bias."""
    return np.concatenate([params.weights.ravel(), params.bias])


def unflatten(vector, d: int, k: int) -> ModelParams:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (d * k + k,):
        raise ValueError(f"vector length {v.size} != d*k+k = {d * k + k}")
    return ModelParams(v[: d * k].reshape(d, k), v[d * k :])


def params_to_bytes(params: ModelParams) -> bytes:
    flat = flatten(params)
    header = struct.pack(_MAGIC_FIELDS, params.d, params.k, flat.size)
    return header + flat.astype("<f8").tobytes()


def params_from_bytes(blob: bytes) -> ModelParams:
    head = struct.calcsize(_MAGIC_FIELDS)
    if len(blob) < head:
        raise ValueError("truncated parameter blob")
    d, k, n = struct.unpack(_MAGIC_FIELDS, blob[:head])
    if n != d * k + k:
        raise ValueError(f"inconsistent header: d={d}, k={k}, length={n}")
    body = np.frombuffer(blob[head:], dtype="<f8")
    if body.size != n:
        raise ValueError(f"expected {n} values, got {body.size}")
    return unflatten(body.astype(np.float64), d, k)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
