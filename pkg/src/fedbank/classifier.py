"""Small differentiable softmax classifier on a flat parameter vector.

Linear by default, optionally one tanh hidden layer. Parameters live in a
single flat float64 vector so federated averaging is a plain convex
combination; gradients are analytic and are checked against finite
differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import RngStream, softmax


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dim: int = 0  # 0 means linear softmax
    l2_penalty: float = 1e-4

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be >= 0")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        d, k, h = self.input_dim, self.num_classes, self.hidden_dim
        if h == 0:
            return ((k, d), (k,))
        return ((h, d), (h,), (k, h), (k,))

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter vector plus the config describing its layout."""

    config: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.shape != (self.config.num_params,):
            raise ValueError(
                f"flat has length {flat.shape}, expected ({self.config.num_params},)"
            )
        if not np.all(np.isfinite(flat)):
            raise ValueError("flat contains non-finite values")
        flat = flat.copy()
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def unpack(self) -> tuple[np.ndarray, ...]:
        """Read-only views of the flat vector, one per layer."""
        out = []
        offset = 0
        for shape in self.config.shapes:
            size = int(np.prod(shape))
            out.append(self.flat[offset : offset + size].reshape(shape))
            offset += size
        return tuple(out)

    def compatible_with(self, other: "ModelParams") -> bool:
        return self.config == other.config


def init_params(config: ModelConfig, rng: RngStream) -> ModelParams:
    """Weights ~ uniform(-0.01, 0.01), biases zero.

    Near-zero weights keep initial predictions close to uniform, which makes
    warm-up behaviour visible in the logs.
    """
    pieces = []
    for shape in config.shapes:
        if len(shape) == 2:  # weight matrix
            pieces.append(rng.uniform(-0.01, 0.01, size=shape).ravel())
        else:  # bias
            pieces.append(np.zeros(shape))
    return ModelParams(config, np.concatenate(pieces))


def _hidden_activations(params: ModelParams, x2d: np.ndarray) -> np.ndarray:
    w1, b1, _, _ = params.unpack()
    return np.tanh(x2d @ w1.T + b1)


def _logits(params: ModelParams, x2d: np.ndarray) -> np.ndarray:
    if params.config.hidden_dim == 0:
        w, b = params.unpack()
        return x2d @ w.T + b
    _, _, w2, b2 = params.unpack()
    return _hidden_activations(params, x2d) @ w2.T + b2


def _as_batch(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise ValueError(
            f"features have shape {x.shape}, expected (*, {params.config.input_dim})"
        )
    return x


def forward(params: ModelParams, x) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single 1-d feature vector")
    return softmax(_logits(params, _as_batch(params, x))[0])


def predict_proba(params: ModelParams, features) -> np.ndarray:
    """Row-wise class probabilities for a batch, shape (n, num_classes)."""
    return softmax(_logits(params, _as_batch(params, features)))


def predict(params: ModelParams, features) -> np.ndarray:
    return np.argmax(_logits(params, _as_batch(params, features)), axis=1)


def backprop_from_logits(
    params: ModelParams, features: np.ndarray, dlogits: np.ndarray
) -> np.ndarray:
    """Map per-sample logit gradients back to a flat parameter gradient.

    `dlogits` must already carry any 1/batch factor. Shared by the
    supervised loss and the sub-bank proportion loss, which differ only in
    how they reach dL/dlogits.
    """
    x = _as_batch(params, features)
    if dlogits.shape != (x.shape[0], params.config.num_classes):
        raise ValueError("dlogits shape mismatch")
    if params.config.hidden_dim == 0:
        dw = dlogits.T @ x
        db = dlogits.sum(axis=0)
        return np.concatenate([dw.ravel(), db])
    w1, b1, w2, b2 = params.unpack()
    h = np.tanh(x @ w1.T + b1)
    dw2 = dlogits.T @ h
    db2 = dlogits.sum(axis=0)
    dh = dlogits @ w2
    da = dh * (1.0 - h * h)
    dw1 = da.T @ x
    db1 = da.sum(axis=0)
    return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])


def _l2_value_and_grad(params: ModelParams) -> tuple[float, np.ndarray]:
    # Penalty applies to weight matrices only, never biases.
    value = 0.0
    grad = np.zeros_like(params.flat)
    offset = 0
    for shape in params.config.shapes:
        size = int(np.prod(shape))
        block = params.flat[offset : offset + size]
        if len(shape) == 2:
            value += float(np.sum(block * block))
            grad[offset : offset + size] = 2.0 * block
        offset += size
    lam = params.config.l2_penalty
    return lam * value, lam * grad


def _check_labels(params: ModelParams, labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= params.config.num_classes:
        raise ValueError("label out of range")
    return y.astype(np.int64)


def supervised_loss(params: ModelParams, features, labels) -> float:
    """Mean cross-entropy over the batch plus the l2 weight penalty."""
    x = _as_batch(params, features)
    y = _check_labels(params, labels)
    probs = softmax(_logits(params, x))
    picked = np.maximum(probs[np.arange(len(y)), y], 1e-12)
    l2_value, _ = _l2_value_and_grad(params)
    return float(-np.mean(np.log(picked)) + l2_value)


def supervised_grad(params: ModelParams, features, labels) -> np.ndarray:
    """Exact gradient of `supervised_loss` with respect to the flat vector."""
    x = _as_batch(params, features)
    y = _check_labels(params, labels)
    probs = softmax(_logits(params, x))
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    _, l2_grad = _l2_value_and_grad(params)
    return backprop_from_logits(params, x, dlogits) + l2_grad


@dataclass(frozen=True)
class OptimizerState:
    """SGD or Adam state; `apply_update` returns fresh copies, never mutates."""

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def init_optimizer(
    num_params: int,
    kind: str = "adam",
    learning_rate: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.99,
) -> OptimizerState:
    zeros = np.zeros(num_params)
    return OptimizerState(
        kind=kind,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        m=zeros,
        v=zeros.copy(),
    )


def apply_update(
    params: ModelParams, grad, opt: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """One optimizer step; returns (new params, new optimizer state)."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ValueError(
            f"gradient has shape {g.shape}, expected {params.flat.shape}"
        )
    step = opt.step_count + 1
    if opt.kind == "sgd":
        new_flat = params.flat - opt.learning_rate * g
        new_opt = replace(opt, step_count=step)
    else:
        m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1**step)
        v_hat = v / (1.0 - opt.beta2**step)
        new_flat = params.flat - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
        new_opt = replace(opt, step_count=step, m=m, v=v)
    return ModelParams(params.config, new_flat), new_opt


def weighted_average(models: list[ModelParams], weights) -> ModelParams:
    """Coordinatewise convex combination of compatible parameter vectors.

    Summation uses math.fsum per coordinate, so the result is exactly
    independent of the order of the (model, weight) pairs.
    """
    if len(models) == 0:
        raise ValueError("need at least one model")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),):
        raise ValueError("weights length must match number of models")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    first = models[0]
    for m in models[1:]:
        if not first.compatible_with(m):
            raise ValueError("models are not aggregation-compatible")
    contrib = w[:, None] * np.stack([m.flat for m in models])
    flat = np.fromiter(
        (math.fsum(col) for col in contrib.T), dtype=np.float64, count=contrib.shape[1]
    )
    return ModelParams(first.config, flat)


def params_to_json(params: ModelParams) -> str:
    doc = {
        "config": {
            "input_dim": params.config.input_dim,
            "num_classes": params.config.num_classes,
            "hidden_dim": params.config.hidden_dim,
            "l2_penalty": params.config.l2_penalty,
        },
        "flat": params.flat.tolist(),
    }
    return json.dumps(doc)


def params_from_json(text: str) -> ModelParams:
    doc = json.loads(text)
    config = ModelConfig(**doc["config"])
    return ModelParams(config, np.asarray(doc["flat"], dtype=np.float64))
