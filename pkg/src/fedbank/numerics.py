"""Core numeric utilities shared by the whole simulator.

Stable softmax, clamped cross-entropy, Frobenius distance, a central
finite-difference gradient checker (the test oracle for every analytic
gradient in the package), and splittable deterministic RNG streams.
All floating-point work is float64; 32-bit precision is not enough for
the gradient checks downstream.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

# Clamp applied inside logarithms so confidently-wrong probabilities stay finite.
LOG_CLAMP = 1e-12

# Tolerance for "entries sum to 1" checks on probability vectors.
PROB_TOL = 1e-9

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One splitmix64 mixing step; spreads integer tags over 64 bits."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Deterministic random stream identified by (seed, stream_id).

    Backed by the counter-based Philox generator, so two streams with the
    same key replay the same sequence, distinct stream ids are independent,
    and a stream's output never depends on how other streams are consumed.
    That makes per-client randomness independent of scheduling order.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.seed, self.stream_id])
        )

    def child(self, *tags: int) -> "RngStream":
        """Derive an independent stream from integer tags.

        Pure: does not advance this stream, and the same tags always yield
        the same child.
        """
        h = self.stream_id
        for tag in tags:
            h = _splitmix64(h ^ _splitmix64(int(tag) & _MASK64))
        return RngStream(self.seed, h)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def dirichlet(self, alpha):
        return self._gen.dirichlet(alpha)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax along the last axis.

    Safe for logit magnitudes up to ~1e3 (the max is subtracted before
    exponentiation, so large gaps underflow to 0 instead of overflowing).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax: empty logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: non-finite logits")
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def check_prob_vector(p, tol: float = PROB_TOL) -> np.ndarray:
    """Validate a probability vector: entries >= 0, sum within `tol` of 1."""
    v = np.asarray(p, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("probability vector must be 1-d and non-empty")
    if not np.all(np.isfinite(v)):
        raise ValueError("probability vector has non-finite entries")
    if np.any(v < 0):
        raise ValueError("probability vector has negative entries")
    if abs(float(v.sum()) - 1.0) > tol:
        raise ValueError(f"probability vector sums to {v.sum()!r}, not 1")
    return v


def cross_entropy(p, label: int) -> float:
    """-log p[label], clamped below at LOG_CLAMP so the result stays finite."""
    v = np.asarray(p, dtype=np.float64)
    label = int(label)
    if not 0 <= label < v.shape[-1]:
        raise ValueError(f"label {label} out of range for {v.shape[-1]} classes")
    return float(-math.log(max(float(v[label]), LOG_CLAMP)))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, (f(x+h)-f(x-h))/2h.

    The independent oracle used to verify every analytic gradient in the
    test suite; raises FloatingPointError if any probe is non-finite.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        hi = float(f(x + step))
        lo = float(f(x - step))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(
                f"finite_diff_grad: non-finite probe at coordinate {i}"
            )
        grad.flat[i] = (hi - lo) / (2.0 * h)
    return grad


def frobenius_distance(a, b) -> float:
    """sqrt of the summed squared entrywise differences of two equal-shape arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("frobenius_distance: non-finite entries")
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)))
