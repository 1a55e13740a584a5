"""Proportion-transition map and the sub-bank classification loss.

The transition converts class probabilities f into sub-bank membership
probabilities g by Bayes' rule over the estimated priors:

    u_m = w_m * sum_k Pi[m,k] * f_k / pi_k,    g = u / sum(u)

where Pi[m, k] is the class-k prior inside sub-bank m, w_m the sub-bank's
share of the bank, and pi the marginal class prior. Training against the
sub-bank index as a proxy label then teaches the classifier the differing
class proportions of the sub-banks. Gradients with respect to the flat
classifier parameters are composed analytically through the fixed chain
logits -> softmax -> mixture -> normalize -> cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import PriorSet
from .classifier import ModelParams, _as_batch, _logits, backprop_from_logits
from .numerics import LOG_CLAMP, check_prob_vector, softmax


@dataclass(frozen=True)
class TransitionContext:
    """Priors held fixed for the duration of one local training epoch.

    Prior estimation is a counting operation, so the gradient treats the
    prior set as a constant; `frozen` documents that contract.
    """

    priors: PriorSet
    frozen: bool = True

    def __post_init__(self):
        if np.any(self.priors.class_priors <= 0):
            raise ValueError("transition requires strictly positive class priors")

    @property
    def num_classes(self) -> int:
        return self.priors.num_classes

    def mixing_matrix(self) -> np.ndarray:
        """A with A[m, k] = w_m * Pi[m, k] / pi_k, so the mixture is u = A f."""
        p = self.priors
        return (
            p.sub_bank_weights[:, None]
            * p.sub_bank_class_priors
            / p.class_priors[None, :]
        )


def transition(f, ctx: TransitionContext) -> np.ndarray:
    """Sub-bank membership probabilities for one class-probability vector."""
    v = check_prob_vector(f)
    if v.shape[0] != ctx.num_classes:
        raise ValueError(
            f"probability vector has {v.shape[0]} classes, context has {ctx.num_classes}"
        )
    mixture = ctx.mixing_matrix() @ v
    total = float(mixture.sum())
    if not np.isfinite(total) or total <= 0:
        raise ValueError("transition mixture degenerated; check the prior set")
    return mixture / total


def transition_batch(probs: np.ndarray, ctx: TransitionContext) -> np.ndarray:
    """Row-wise transition for an (n, K) matrix of class probabilities."""
    mixtures = probs @ ctx.mixing_matrix().T
    return mixtures / mixtures.sum(axis=1, keepdims=True)


def _check_proxy_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError("proxy label out of range")
    return y.astype(np.int64)


def sub_bank_loss(
    params: ModelParams, features, proxy_labels, ctx: TransitionContext
) -> float:
    """Mean cross-entropy of transitioned predictions against sub-bank indices."""
    x = _as_batch(params, features)
    y = _check_proxy_labels(proxy_labels, ctx.num_classes)
    probs = softmax(_logits(params, x))
    g = transition_batch(probs, ctx)
    picked = np.maximum(g[np.arange(len(y)), y], LOG_CLAMP)
    return float(-np.mean(np.log(picked)))


def sub_bank_loss_grad(
    params: ModelParams, features, proxy_labels, ctx: TransitionContext
) -> np.ndarray:
    """Exact gradient of `sub_bank_loss` with respect to the flat parameters.

    Reverse sweep over the fixed chain: with u = A f and s = sum(u),
    dL/du = 1/s - e_y / u_y, dL/df = A^T dL/du, then the softmax Jacobian
    maps dL/df onto the logits. No l2 term is added here.
    """
    x = _as_batch(params, features)
    y = _check_proxy_labels(proxy_labels, ctx.num_classes)
    n = len(y)
    a = ctx.mixing_matrix()
    probs = softmax(_logits(params, x))
    mixtures = probs @ a.T  # (n, K), row i holds u for sample i
    totals = mixtures.sum(axis=1, keepdims=True)
    dmix = np.ones_like(mixtures) / totals
    rows = np.arange(n)
    dmix[rows, y] -= 1.0 / mixtures[rows, y]
    dprobs = dmix @ a
    inner = np.sum(probs * dprobs, axis=1, keepdims=True)
    dlogits = probs * (dprobs - inner)
    dlogits /= n
    return backprop_from_logits(params, x, dlogits)


def identity_context(class_priors) -> TransitionContext:
    """Context whose sub-banks coincide with classes: transition becomes identity."""
    p = np.asarray(class_priors, dtype=np.float64)
    return TransitionContext(
        priors=PriorSet(
            sub_bank_class_priors=np.eye(p.shape[0]),
            sub_bank_weights=p,
            class_priors=p,
        )
    )
