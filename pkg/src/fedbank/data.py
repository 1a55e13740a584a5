"""Dataset generation, CSV loading, and Dirichlet label-skew partitioning.

The partitioner reserves a small balanced labeled set for the server,
carves identically-distributed validation/test splits before any client
allocation, and spreads the remaining unlabeled samples across clients
with per-class proportions drawn from a Dirichlet distribution.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream


class DataLoadError(ValueError):
    """Raised when an external tabular file cannot be parsed."""


class PartitionError(RuntimeError):
    """Raised when a client partition cannot satisfy its constraints."""


@dataclass
class Dataset:
    """Feature matrix with optional integer labels and stable sample ids.

    Ids identify samples across shuffles and partitioning, so a sample keeps
    its identity when it moves into a client shard or a bank.
    """

    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        n = self.features.shape[0]
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise ValueError("ids must be one per sample")
        if len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("labels must be one per sample")
            if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            num_classes=self.num_classes,
            ids=self.ids[idx],
        )

    def without_labels(self) -> "Dataset":
        return Dataset(self.features, None, self.num_classes, self.ids)

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class PartitionSpec:
    """How to split a labeled pool into server / clients / validation / test."""

    num_clients: int
    gamma: float = 1.5
    proportion_bounds: tuple[float, float] = (0.05, 0.5)
    server_per_class: int = 15
    max_resample_attempts: int = 1000
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    balanced_server: bool = True  # exactly server_per_class labeled samples per class

    def __post_init__(self):
        lo, hi = self.proportion_bounds
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not (0 <= lo < hi <= 1):
            raise ValueError("proportion_bounds must satisfy 0 <= lo < hi <= 1")
        if lo * self.num_clients > 1:
            raise ValueError("lower proportion bound infeasible for this many clients")
        if self.server_per_class < 1:
            raise ValueError("server_per_class must be >= 1")
        if self.max_resample_attempts < 1:
            raise ValueError("max_resample_attempts must be >= 1")
        if not (0 <= self.val_fraction and 0 <= self.test_fraction):
            raise ValueError("fractions must be >= 0")
        if self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val_fraction + test_fraction must be < 1")


@dataclass
class FederationData:
    """Frozen result of a partition run.

    Client datasets carry no labels; the true labels are retained privately
    and are reachable only through `client_labels_oracle`, which exists for
    evaluation and for the fully-supervised upper-bound baseline. Training
    code must never touch it for unlabeled algorithms.
    """

    server_labeled: Dataset
    clients: list[Dataset]
    true_client_priors: np.ndarray
    validation: Dataset
    test: Dataset
    _client_labels: list[np.ndarray] = field(repr=False, default_factory=list)

    def client_labels_oracle(self, client_id: int) -> np.ndarray:
        """True labels of a client shard; evaluation-only accessor."""
        return self._client_labels[client_id].copy()

    def manifest(self) -> dict:
        """JSON-exportable partition manifest: id lists plus realized priors."""
        return {
            "server_ids": self.server_labeled.ids.tolist(),
            "validation_ids": self.validation.ids.tolist(),
            "test_ids": self.test.ids.tolist(),
            "clients": [
                {"client_id": c, "ids": ds.ids.tolist()}
                for c, ds in enumerate(self.clients)
            ],
            "true_client_priors": self.true_client_priors.tolist(),
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest())


def _equidistant_centers(num_classes: int, dim: int) -> np.ndarray:
    """K pairwise-equidistant unit vectors (regular simplex vertices) in R^dim."""
    k = num_classes
    if dim < k - 1:
        raise ValueError(
            f"cannot place {k} equidistant centers in {dim} dimensions"
        )
    m = np.eye(k) - 1.0 / k  # rank k-1, rows pairwise equidistant
    if dim >= k:
        centers = np.zeros((k, dim))
        centers[:, :k] = m
    else:  # dim == k - 1: rotate into the (k-1)-dim row space
        _, _, vt = np.linalg.svd(m)
        centers = m @ vt[: k - 1].T
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def generate_gaussian_mixture(
    num_classes: int,
    dim: int,
    per_class_counts,
    separation: float,
    rng: RngStream,
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs on equidistant class centers.

    Every center sits at distance `separation` from the global centroid, so
    a single knob controls the achievable (Bayes) accuracy.
    """
    counts = [int(c) for c in per_class_counts]
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if separation <= 0:
        raise ValueError("separation must be > 0")
    if len(counts) != num_classes:
        raise ValueError(
            f"per_class_counts has {len(counts)} entries, expected {num_classes}"
        )
    if any(c < 1 for c in counts):
        raise ValueError("every class needs at least one sample")
    centers = _equidistant_centers(num_classes, dim) * separation
    blocks = []
    labels = []
    for k, n_k in enumerate(counts):
        blocks.append(rng.normal(size=(n_k, dim)) + centers[k])
        labels.append(np.full(n_k, k, dtype=np.int64))
    features = np.concatenate(blocks)
    y = np.concatenate(labels)
    order = rng.permutation(len(y))
    return Dataset(
        features=features[order],
        labels=y[order],
        num_classes=num_classes,
        ids=np.arange(len(y), dtype=np.int64),
    )


def load_csv(path, label_column: str | None = None) -> Dataset:
    """Load a UTF-8 comma-separated file with a header row.

    Feature columns must be numeric; the label column, when named, must hold
    non-negative integers. Errors name the offending row and column.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataLoadError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataLoadError("empty dataset: no header row") from None
        header = [h.strip() for h in header]
        label_idx = None
        if label_column is not None:
            if label_column not in header:
                raise DataLoadError(f"label column {label_column!r} not in header")
            label_idx = header.index(label_column)
        features = []
        labels = []
        for row_num, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataLoadError(
                    f"row {row_num}: expected {len(header)} cells, got {len(row)}"
                )
            feats = []
            for col_idx, cell in enumerate(row):
                name = header[col_idx]
                if col_idx == label_idx:
                    try:
                        value = float(cell)
                    except ValueError:
                        raise DataLoadError(
                            f"row {row_num}, column {name!r}: non-numeric label {cell!r}"
                        ) from None
                    if value != int(value):
                        raise DataLoadError(
                            f"row {row_num}, column {name!r}: label {cell!r} is not an integer"
                        )
                    if value < 0:
                        raise DataLoadError(
                            f"row {row_num}, column {name!r}: negative label {cell!r}"
                        )
                    labels.append(int(value))
                else:
                    try:
                        feats.append(float(cell))
                    except ValueError:
                        raise DataLoadError(
                            f"row {row_num}, column {name!r}: non-numeric cell {cell!r}"
                        ) from None
            features.append(feats)
    if not features:
        raise DataLoadError("empty dataset")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64) if label_idx is not None else None
    num_classes = int(y.max()) + 1 if y is not None else 0
    return Dataset(
        features=x,
        labels=y,
        num_classes=num_classes,
        ids=np.arange(x.shape[0], dtype=np.int64),
    )


def largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` by proportions; conserves the total exactly."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        remainders = raw - base
        # stable argsort on negated remainders: ties broken by index
        order = np.argsort(-remainders, kind="stable")
        base[order[:short]] += 1
    return base


def _bounded_dirichlet(
    gamma: float,
    num_clients: int,
    bounds: tuple[float, float],
    max_attempts: int,
    rng: RngStream,
    class_index: int,
) -> np.ndarray:
    lo, hi = bounds
    for _ in range(max_attempts):
        p = rng.dirichlet(np.full(num_clients, gamma))
        if np.all(p >= lo) and np.all(p <= hi):
            return p
    raise PartitionError(
        f"class {class_index}: no Dirichlet draw within bounds [{lo}, {hi}] "
        f"after {max_attempts} attempts"
    )


def dirichlet_partition(
    full: Dataset, spec: PartitionSpec, rng: RngStream
) -> FederationData:
    """Split a labeled pool into server/client/validation/test shards.

    Order of operations: per-class validation/test carve-out first (so the
    evaluation splits are identically distributed regardless of client
    count), then the balanced server reserve, then per-class Dirichlet
    allocation of the remainder across clients with rejection resampling to
    keep every realized proportion inside `proportion_bounds`.
    """
    if full.labels is None:
        raise ValueError("dirichlet_partition needs a labeled dataset")
    k = full.num_classes
    c = spec.num_clients
    val_rows, test_rows, train_rows_by_class = [], [], []
    for cls in range(k):
        rows = np.flatnonzero(full.labels == cls)
        rows = rows[rng.permutation(len(rows))]
        n_val = int(round(spec.val_fraction * len(rows)))
        n_test = int(round(spec.test_fraction * len(rows)))
        n_train = len(rows) - n_val - n_test
        if n_train < spec.server_per_class + 1:
            raise ValueError(
                f"class {cls}: {n_train} training samples cannot cover "
                f"server_per_class={spec.server_per_class} plus client data"
            )
        val_rows.append(rows[:n_val])
        test_rows.append(rows[n_val : n_val + n_test])
        train_rows_by_class.append(rows[n_val + n_test :])

    train_rows_by_class = [np.asarray(r) for r in train_rows_by_class]
    if spec.balanced_server:
        server_rows = np.concatenate(
            [rows[: spec.server_per_class] for rows in train_rows_by_class]
        )
        client_pool_by_class = [
            rows[spec.server_per_class :] for rows in train_rows_by_class
        ]
    else:
        pool = np.concatenate(train_rows_by_class)
        pool = pool[rng.permutation(len(pool))]
        n_server = spec.server_per_class * k
        server_rows = pool[:n_server]
        rest = pool[n_server:]
        client_pool_by_class = [
            rest[full.labels[rest] == cls] for cls in range(k)
        ]

    client_rows: list[list[np.ndarray]] = [[] for _ in range(c)]
    for cls in range(k):
        pool = client_pool_by_class[cls]
        p = _bounded_dirichlet(
            spec.gamma, c, spec.proportion_bounds, spec.max_resample_attempts, rng, cls
        )
        counts = largest_remainder_counts(p, len(pool))
        offset = 0
        for client in range(c):
            client_rows[client].append(pool[offset : offset + counts[client]])
            offset += counts[client]

    clients: list[Dataset] = []
    client_labels: list[np.ndarray] = []
    priors = np.zeros((c, k))
    for client in range(c):
        rows = np.concatenate(client_rows[client])
        if len(rows) == 0:
            raise PartitionError(f"client {client} received no samples")
        shard = full.subset(rows)
        assert shard.labels is not None
        counts = np.bincount(shard.labels, minlength=k)
        priors[client] = counts / counts.sum()
        client_labels.append(shard.labels.copy())
        clients.append(shard.without_labels())

    return FederationData(
        server_labeled=full.subset(server_rows),
        clients=clients,
        true_client_priors=priors,
        validation=full.subset(np.concatenate(val_rows)),
        test=full.subset(np.concatenate(test_rows)),
        _client_labels=client_labels,
    )
