"""Per-client dynamic bank of confidently-predicted unlabeled samples.

The bank grows and prunes itself each round with two confidence
thresholds: entries admitted when the current top-class probability
exceeds tau_beta, and retained only while the confidence recorded at the
previous round stays at or above tau_alpha. Banked samples are split into
K random near-equal sub-banks whose indices serve as proxy labels, and
the pseudo-label composition of each sub-bank yields the class-prior
estimates that drive proportion-aware training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .numerics import RngStream

UNASSIGNED = -1

# Floor applied to estimated marginal class priors: the proportion-transition
# map divides by them, so a class absent from all pseudo-labels must not
# produce a division by zero.
PRIOR_FLOOR = 1e-6


class InsufficientBankError(ValueError):
    """Bank too small to split into the requested number of sub-banks."""


@dataclass
class BankEntry:
    sample_id: int
    confidence: float
    pseudo_label: int
    sub_bank: int = UNASSIGNED


@dataclass
class DynamicBank:
    """Set of banked samples keyed by sample id, plus the two thresholds."""

    tau_alpha: float
    tau_beta: float
    entries: dict[int, BankEntry] = field(default_factory=dict)
    round: int = 0

    def __post_init__(self):
        if not (0.0 <= self.tau_beta <= self.tau_alpha <= 1.0):
            raise ValueError(
                f"thresholds must satisfy 0 <= tau_beta <= tau_alpha <= 1, "
                f"got tau_beta={self.tau_beta}, tau_alpha={self.tau_alpha}"
            )

    def __len__(self) -> int:
        return len(self.entries)

    def sorted_ids(self) -> list[int]:
        return sorted(self.entries)


def empty_bank(tau_alpha: float, tau_beta: float) -> DynamicBank:
    return DynamicBank(tau_alpha=tau_alpha, tau_beta=tau_beta)


def _confidences(predictions: Mapping[int, np.ndarray]) -> dict[int, tuple[float, int]]:
    out = {}
    for sample_id, probs in predictions.items():
        p = np.asarray(probs, dtype=np.float64)
        label = int(np.argmax(p))
        out[int(sample_id)] = (float(p[label]), label)
    return out


def update_bank(
    bank: DynamicBank, predictions: Mapping[int, np.ndarray]
) -> DynamicBank:
    """One dual-threshold refresh from the current round's predictions.

    Keeps entries whose stored (previous-round) confidence is >= tau_alpha,
    admits every sample whose current confidence is > tau_beta, and
    refreshes confidences and pseudo-labels of the whole result from the
    current predictions. Returns a new bank with the round advanced.
    """
    missing = [i for i in bank.entries if i not in predictions]
    if missing:
        raise ValueError(f"predictions missing for banked samples {missing[:5]}")
    current = _confidences(predictions)
    retained = {i for i, e in bank.entries.items() if e.confidence >= bank.tau_alpha}
    admitted = {i for i, (conf, _) in current.items() if conf > bank.tau_beta}
    new_entries = {}
    for sample_id in sorted(retained | admitted):
        conf, label = current[sample_id]
        prev = bank.entries.get(sample_id)
        new_entries[sample_id] = BankEntry(
            sample_id=sample_id,
            confidence=conf,
            pseudo_label=label,
            sub_bank=prev.sub_bank if (prev is not None and sample_id in retained) else UNASSIGNED,
        )
    return replace(bank, entries=new_entries, round=bank.round + 1)


def update_bank_fixed(
    bank: DynamicBank, predictions: Mapping[int, np.ndarray]
) -> DynamicBank:
    """Ablation variant: rebuild the bank from scratch each round, keeping
    only samples whose current confidence exceeds tau_alpha (single static
    threshold, no retention rule)."""
    current = _confidences(predictions)
    new_entries = {}
    for sample_id in sorted(current):
        conf, label = current[sample_id]
        if conf > bank.tau_alpha:
            prev = bank.entries.get(sample_id)
            new_entries[sample_id] = BankEntry(
                sample_id=sample_id,
                confidence=conf,
                pseudo_label=label,
                sub_bank=prev.sub_bank if prev is not None else UNASSIGNED,
            )
    return replace(bank, entries=new_entries, round=bank.round + 1)


def split_sub_banks(
    bank: DynamicBank, num_classes: int, rng: RngStream, persistent: bool = False
) -> DynamicBank:
    """Assign every entry to one of K random non-overlapping sub-banks.

    Default mode re-randomizes the whole assignment; sizes differ by at
    most one. Persistent mode keeps prior assignments and balances only the
    new entries onto the currently smallest sub-banks.
    """
    n = len(bank.entries)
    if n == 0:
        raise InsufficientBankError("cannot split an empty bank")
    if n < num_classes:
        raise InsufficientBankError(
            f"bank holds {n} samples, fewer than {num_classes} sub-banks"
        )
    ids = bank.sorted_ids()
    new_entries = {i: replace(bank.entries[i]) for i in ids}
    if persistent:
        sizes = np.zeros(num_classes, dtype=np.int64)
        unassigned = []
        for i in ids:
            sb = new_entries[i].sub_bank
            if 0 <= sb < num_classes:
                sizes[sb] += 1
            else:
                unassigned.append(i)
        order = rng.permutation(len(unassigned))
        for j in order:
            target = int(np.argmin(sizes))
            new_entries[unassigned[j]].sub_bank = target
            sizes[target] += 1
    else:
        perm = rng.permutation(n)
        for pos, j in enumerate(perm):
            new_entries[ids[j]].sub_bank = pos % num_classes
    return replace(bank, entries=new_entries)


@dataclass(frozen=True)
class PriorSet:
    """Estimated priors feeding the proportion-transition map.

    `sub_bank_class_priors` rows are the pseudo-label distributions of each
    sub-bank, `sub_bank_weights` is each sub-bank's share of the bank, and
    `class_priors` is the (floored, renormalized) marginal class prior.
    """

    sub_bank_class_priors: np.ndarray  # (K, K), rows sum to 1
    sub_bank_weights: np.ndarray  # (K,), sums to 1
    class_priors: np.ndarray  # (K,), strictly positive, sums to 1
    degenerate: bool = False  # true when the floor had to kick in

    def __post_init__(self):
        pi = np.asarray(self.sub_bank_class_priors, dtype=np.float64)
        w = np.asarray(self.sub_bank_weights, dtype=np.float64)
        p = np.asarray(self.class_priors, dtype=np.float64)
        k = pi.shape[0]
        if pi.shape != (k, k) or w.shape != (k,) or p.shape != (k,):
            raise ValueError("prior set shapes are inconsistent")
        if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("sub-bank class prior rows must be distributions")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("sub-bank weights must form a distribution")
        if np.any(p <= 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("class priors must be strictly positive and sum to 1")
        object.__setattr__(self, "sub_bank_class_priors", pi)
        object.__setattr__(self, "sub_bank_weights", w)
        object.__setattr__(self, "class_priors", p)

    @property
    def num_classes(self) -> int:
        return self.sub_bank_weights.shape[0]


def estimate_priors(bank: DynamicBank, num_classes: int) -> PriorSet:
    """Count pseudo-labels per sub-bank into the prior set.

    Row m of the sub-bank prior matrix is the pseudo-label histogram of
    sub-bank m; the marginal prior is the weight-averaged mixture of the
    rows, floored at PRIOR_FLOOR and renormalized.
    """
    if not bank.entries:
        raise ValueError("cannot estimate priors from an empty bank")
    counts = np.zeros((num_classes, num_classes), dtype=np.float64)
    for entry in bank.entries.values():
        if not 0 <= entry.sub_bank < num_classes:
            raise ValueError(f"sample {entry.sample_id} has no sub-bank assignment")
        if not 0 <= entry.pseudo_label < num_classes:
            raise ValueError(f"sample {entry.sample_id} has invalid pseudo-label")
        counts[entry.sub_bank, entry.pseudo_label] += 1.0
    sizes = counts.sum(axis=1)
    if np.any(sizes == 0):
        empty = np.flatnonzero(sizes == 0).tolist()
        raise ValueError(f"sub-banks {empty} are empty")
    pi = counts / sizes[:, None]
    weights = sizes / len(bank.entries)
    marginal_raw = weights @ pi
    degenerate = bool(np.any(marginal_raw < PRIOR_FLOOR))
    marginal = np.maximum(marginal_raw, PRIOR_FLOOR)
    marginal = marginal / marginal.sum()
    return PriorSet(
        sub_bank_class_priors=pi,
        sub_bank_weights=weights,
        class_priors=marginal,
        degenerate=degenerate,
    )


def coverage(bank: DynamicBank, client_size: int) -> float:
    """Fraction of a client's samples currently held in the bank."""
    if client_size < 1:
        raise ValueError("client_size must be >= 1")
    return len(bank.entries) / client_size


def snapshot(bank: DynamicBank) -> dict:
    """JSON-exportable view of the bank for offline analysis."""
    return {
        "round": bank.round,
        "tau_alpha": bank.tau_alpha,
        "tau_beta": bank.tau_beta,
        "entries": [
            {
                "sample_id": e.sample_id,
                "confidence": e.confidence,
                "pseudo_label": e.pseudo_label,
                "sub_bank": e.sub_bank,
            }
            for e in (bank.entries[i] for i in bank.sorted_ids())
        ],
    }
