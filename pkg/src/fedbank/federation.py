"""Round-based orchestration of the semi-supervised federation.

Each communication round broadcasts the global model, lets every client
refresh its bank and train on sub-bank proxy labels, aggregates the client
models FedAvg-style weighted by client dataset sizes, and finishes with a
few supervised steps on the server's labeled data. Baselines reuse the
same loop with different local-training rules: fully supervised (upper
bound), fixed-threshold pseudo-labeling, and server-only training.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import bank as bank_mod
from .bank import DynamicBank, empty_bank, estimate_priors, split_sub_banks
from .classifier import (
    ModelConfig,
    ModelParams,
    apply_update,
    init_optimizer,
    init_params,
    predict_proba,
    supervised_grad,
    supervised_loss,
    weighted_average,
)
from .data import Dataset, FederationData
from .metrics import MetricReport, evaluate_model, prior_error
from .numerics import RngStream
from .transition import TransitionContext, sub_bank_loss, sub_bank_loss_grad

logger = logging.getLogger(__name__)

ALGORITHMS = ("imfed_semi", "fedavg_sl", "server_only", "naive_pseudo")
BANK_MODES = ("dynamic", "fixed")

# Child-stream tags for the per-run RNG tree; fixed so that adding clients
# or rounds never shifts anyone else's randomness.
_TAG_WARMUP = 1
_TAG_CLIENT = 2


@dataclass
class FedConfig:
    rounds: int = 100
    local_epochs: int = 1
    warmup_epochs: int = 30
    batch_size: int = 32
    tau_alpha: float = 0.9
    tau_beta: float = 0.5
    server_steps_per_round: int = 5
    algorithm: str = "imfed_semi"
    seed: int = 0
    optimizer: str = "adam"
    learning_rate: float = 0.02
    server_learning_rate: float | None = None
    warmup_learning_rate: float | None = None
    bank_mode: str = "dynamic"
    persistent_split: bool = False
    weight_by_bank: bool = False
    selection_metric: str = "accuracy"
    parallelism: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (0.0 <= self.tau_beta <= self.tau_alpha <= 1.0):
            raise ValueError(
                "tau_beta and tau_alpha must satisfy 0 <= tau_beta <= tau_alpha <= 1"
            )
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.server_steps_per_round < 0:
            raise ValueError("server_steps_per_round must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.server_learning_rate is not None and self.server_learning_rate <= 0:
            raise ValueError("server_learning_rate must be > 0")
        if self.warmup_learning_rate is not None and self.warmup_learning_rate <= 0:
            raise ValueError("warmup_learning_rate must be > 0")
        if self.bank_mode not in BANK_MODES:
            raise ValueError(f"bank_mode must be one of {BANK_MODES}")
        if self.selection_metric not in MetricReport.metric_names():
            raise ValueError(
                f"selection_metric must be one of {MetricReport.metric_names()}"
            )
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    @property
    def effective_server_lr(self) -> float:
        return (
            self.learning_rate
            if self.server_learning_rate is None
            else self.server_learning_rate
        )

    @property
    def effective_warmup_lr(self) -> float:
        return (
            self.effective_server_lr
            if self.warmup_learning_rate is None
            else self.warmup_learning_rate
        )


@dataclass
class ClientState:
    client_id: int
    features: np.ndarray
    ids: np.ndarray
    bank: DynamicBank
    rng: RngStream
    local_params: ModelParams | None = None
    true_class_proportions: np.ndarray | None = None
    labels_for_eval: np.ndarray | None = None  # revealed only for fedavg_sl

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class ClientRoundLog:
    client_id: int
    skipped: bool
    coverage: float
    bank_size: int
    local_loss: float | None
    prior_error: float | None

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "skipped": self.skipped,
            "coverage": self.coverage,
            "bank_size": self.bank_size,
            "local_loss": self.local_loss,
            "prior_error": self.prior_error,
        }


@dataclass
class RoundLog:
    round: int
    server_loss: float
    global_metrics: MetricReport | None
    per_client: list[ClientRoundLog] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "server_loss": self.server_loss,
            "validation": None
            if self.global_metrics is None
            else self.global_metrics.to_dict(),
            "clients": [c.to_dict() for c in self.per_client],
        }


def train_epochs(
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    grad_fn,
    config: FedConfig,
    rng: RngStream,
    epochs: int,
    learning_rate: float | None = None,
) -> ModelParams:
    """Mini-batch training epochs with a fresh optimizer.

    `grad_fn(params, x, y)` returns a flat gradient; the same loop serves
    supervised, pseudo-label, and sub-bank objectives.
    """
    n = features.shape[0]
    opt = init_optimizer(
        params.config.num_params,
        kind=config.optimizer,
        learning_rate=config.learning_rate if learning_rate is None else learning_rate,
    )
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            grad = grad_fn(params, features[idx], labels[idx])
            params, opt = apply_update(params, grad, opt)
    return params


def warmup(
    server_data: Dataset,
    model_config: ModelConfig,
    config: FedConfig,
    rng: RngStream,
) -> ModelParams:
    """Initialize the global model and train it on server labels only."""
    if server_data.labels is None:
        raise ValueError("warm-up needs labeled server data")
    counts = server_data.class_counts()
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"server data is missing classes {missing}")
    params = init_params(model_config, rng.child(0))
    if config.warmup_epochs == 0:
        return params
    return train_epochs(
        params,
        server_data.features,
        server_data.labels,
        supervised_grad,
        config,
        rng.child(1),
        epochs=config.warmup_epochs,
        learning_rate=config.effective_warmup_lr,
    )


def make_client_states(
    fed_data: FederationData, config: FedConfig
) -> list[ClientState]:
    root = RngStream(config.seed)
    states = []
    for cid, shard in enumerate(fed_data.clients):
        states.append(
            ClientState(
                client_id=cid,
                features=shard.features,
                ids=shard.ids,
                bank=empty_bank(config.tau_alpha, config.tau_beta),
                rng=root.child(_TAG_CLIENT, cid),
                true_class_proportions=fed_data.true_client_priors[cid],
                labels_for_eval=(
                    fed_data.client_labels_oracle(cid)
                    if config.algorithm == "fedavg_sl"
                    else None
                ),
            )
        )
    return states


def _skip_log(state: ClientState, num_samples: int) -> ClientRoundLog:
    return ClientRoundLog(
        client_id=state.client_id,
        skipped=True,
        coverage=bank_mod.coverage(state.bank, num_samples),
        bank_size=len(state.bank),
        local_loss=None,
        prior_error=None,
    )


def _bank_client_round(
    state: ClientState,
    broadcast: ModelParams,
    config: FedConfig,
    num_classes: int,
    round_rng: RngStream,
) -> tuple[ClientState, ClientRoundLog]:
    """Bank refresh, prior estimation, and sub-bank proxy training."""
    n = len(state)
    probs = predict_proba(broadcast, state.features)
    pred_map = {int(sid): probs[row] for row, sid in enumerate(state.ids)}
    if config.bank_mode == "fixed":
        new_bank = bank_mod.update_bank_fixed(state.bank, pred_map)
    else:
        new_bank = bank_mod.update_bank(state.bank, pred_map)
    state = replace(state, bank=new_bank, local_params=broadcast)
    if len(new_bank) < num_classes:
        return state, _skip_log(state, n)
    new_bank = split_sub_banks(
        new_bank, num_classes, round_rng.child(0), persistent=config.persistent_split
    )
    state = replace(state, bank=new_bank)
    assignments = np.array(
        [new_bank.entries[i].sub_bank for i in new_bank.sorted_ids()], dtype=np.int64
    )
    if np.bincount(assignments, minlength=num_classes).min() == 0:
        return state, _skip_log(state, n)
    priors = estimate_priors(new_bank, num_classes)
    ctx = TransitionContext(priors)
    row_of = {int(sid): row for row, sid in enumerate(state.ids)}
    banked_rows = np.array([row_of[i] for i in new_bank.sorted_ids()], dtype=np.int64)
    x = state.features[banked_rows]
    trained = train_epochs(
        state.local_params,
        x,
        assignments,
        lambda p, xb, yb: sub_bank_loss_grad(p, xb, yb, ctx),
        config,
        round_rng.child(1),
        epochs=config.local_epochs,
    )
    state = replace(state, local_params=trained)
    log = ClientRoundLog(
        client_id=state.client_id,
        skipped=False,
        coverage=bank_mod.coverage(new_bank, n),
        bank_size=len(new_bank),
        local_loss=sub_bank_loss(trained, x, assignments, ctx),
        prior_error=(
            None
            if state.true_class_proportions is None
            else prior_error(priors, state.true_class_proportions)
        ),
    )
    return state, log


def _pseudo_label_client_round(
    state: ClientState,
    broadcast: ModelParams,
    config: FedConfig,
    round_rng: RngStream,
) -> tuple[ClientState, ClientRoundLog]:
    """Fixed-threshold pseudo-labeling: no bank, no proportion signal."""
    n = len(state)
    probs = predict_proba(broadcast, state.features)
    confidence = probs.max(axis=1)
    pseudo = probs.argmax(axis=1)
    mask = confidence > config.tau_alpha
    state = replace(state, local_params=broadcast)
    if not mask.any():
        return state, ClientRoundLog(
            client_id=state.client_id,
            skipped=True,
            coverage=0.0,
            bank_size=0,
            local_loss=None,
            prior_error=None,
        )
    x = state.features[mask]
    y = pseudo[mask]
    trained = train_epochs(
        state.local_params,
        x,
        y,
        supervised_grad,
        config,
        round_rng.child(1),
        epochs=config.local_epochs,
    )
    state = replace(state, local_params=trained)
    log = ClientRoundLog(
        client_id=state.client_id,
        skipped=False,
        coverage=float(mask.mean()),
        bank_size=int(mask.sum()),
        local_loss=supervised_loss(trained, x, y),
        prior_error=None,
    )
    return state, log


def _supervised_client_round(
    state: ClientState,
    broadcast: ModelParams,
    config: FedConfig,
    round_rng: RngStream,
) -> tuple[ClientState, ClientRoundLog]:
    """Upper-bound baseline: local labels revealed through the oracle."""
    if state.labels_for_eval is None:
        raise ValueError("fedavg_sl requires oracle labels on client states")
    state = replace(state, local_params=broadcast)
    trained = train_epochs(
        state.local_params,
        state.features,
        state.labels_for_eval,
        supervised_grad,
        config,
        round_rng.child(1),
        epochs=config.local_epochs,
    )
    state = replace(state, local_params=trained)
    log = ClientRoundLog(
        client_id=state.client_id,
        skipped=False,
        coverage=1.0,
        bank_size=len(state),
        local_loss=supervised_loss(trained, state.features, state.labels_for_eval),
        prior_error=None,
    )
    return state, log


def _client_round(
    state: ClientState,
    broadcast: ModelParams,
    config: FedConfig,
    num_classes: int,
    round_index: int,
) -> tuple[ClientState, ClientRoundLog]:
    round_rng = state.rng.child(round_index)
    if config.algorithm in ("imfed_semi",):
        return _bank_client_round(state, broadcast, config, num_classes, round_rng)
    if config.algorithm == "naive_pseudo":
        return _pseudo_label_client_round(state, broadcast, config, round_rng)
    if config.algorithm == "fedavg_sl":
        return _supervised_client_round(state, broadcast, config, round_rng)
    raise ValueError(f"algorithm {config.algorithm!r} has no client round")


def _server_steps(
    params: ModelParams, server_data: Dataset, config: FedConfig
) -> tuple[ModelParams, float]:
    opt = init_optimizer(
        params.config.num_params,
        kind=config.optimizer,
        learning_rate=config.effective_server_lr,
    )
    for _ in range(config.server_steps_per_round):
        grad = supervised_grad(params, server_data.features, server_data.labels)
        params, opt = apply_update(params, grad, opt)
    loss = supervised_loss(params, server_data.features, server_data.labels)
    return params, loss


def run_round(
    global_params: ModelParams,
    clients: list[ClientState],
    server_data: Dataset,
    config: FedConfig,
    round_index: int,
    validation: Dataset | None = None,
) -> tuple[ModelParams, list[ClientState], RoundLog]:
    """One communication round.

    Broadcast, per-client bank refresh + local training (skipped clients
    contribute their unchanged broadcast parameters), size-weighted
    aggregation in canonical client order, then the server's supervised
    steps. Clients may be processed in parallel; results do not depend on
    the processing order or the degree of parallelism.
    """
    num_classes = global_params.config.num_classes
    per_client_logs: list[ClientRoundLog] = []
    if config.algorithm == "server_only":
        aggregated = global_params
        new_clients = clients
    else:
        if config.parallelism > 1 and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                results = list(
                    pool.map(
                        lambda s: _client_round(
                            s, global_params, config, num_classes, round_index
                        ),
                        clients,
                    )
                )
        else:
            results = [
                _client_round(s, global_params, config, num_classes, round_index)
                for s in clients
            ]
        new_clients = [r[0] for r in results]
        per_client_logs = [r[1] for r in results]
        # canonical order: aggregation must not depend on list order
        ordered = sorted(new_clients, key=lambda s: s.client_id)
        if config.weight_by_bank:
            sizes = np.array([len(s.bank) for s in ordered], dtype=np.float64)
            if sizes.sum() == 0:
                sizes = np.ones(len(ordered))
        else:
            sizes = np.array([len(s) for s in ordered], dtype=np.float64)
        weights = sizes / sizes.sum()
        aggregated = weighted_average([s.local_params for s in ordered], weights)
    new_global, server_loss = _server_steps(aggregated, server_data, config)
    report = None if validation is None else evaluate_model(new_global, validation)
    log = RoundLog(
        round=round_index,
        server_loss=server_loss,
        global_metrics=report,
        per_client=per_client_logs,
    )
    return new_global, new_clients, log


def run_experiment(
    fed_data: FederationData,
    model_config: ModelConfig,
    config: FedConfig,
) -> tuple[ModelParams, list[RoundLog]]:
    """Warm-up plus the full round schedule with validation-based selection.

    Returns the parameters with the best validation score seen across the
    warm-up model and every round, together with all round logs.
    """
    root = RngStream(config.seed)
    params = warmup(fed_data.server_labeled, model_config, config, root.child(_TAG_WARMUP))
    clients = make_client_states(fed_data, config)
    selector = config.selection_metric
    # checkpoint-and-restore over rounds; the warm-up model stands only when
    # there are no rounds at all
    best_params = params
    best_score = -np.inf
    logs: list[RoundLog] = []
    for round_index in range(1, config.rounds + 1):
        params, clients, log = run_round(
            params,
            clients,
            fed_data.server_labeled,
            config,
            round_index,
            validation=fed_data.validation,
        )
        logs.append(log)
        score = getattr(log.global_metrics, selector)
        if score > best_score:
            best_score = score
            best_params = params
        logger.debug(
            "round %d: %s=%.4f server_loss=%.4f",
            round_index,
            selector,
            score,
            log.server_loss,
        )
    return best_params, logs
