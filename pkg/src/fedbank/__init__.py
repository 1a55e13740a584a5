"""Desk-scale simulator of class-imbalanced semi-supervised federated
learning where only the server holds labeled data.

Clients hold unlabeled shards with Dirichlet label skew. Each round they
collect confidently-predicted samples into a dynamic bank, split it into
random sub-banks, estimate class priors from pseudo-labels, and train
against sub-bank indices through a Bayes-rule proportion transition, so
local models learn class proportions instead of chasing per-sample
pseudo-labels. The package bundles the full protocol, supervised and
pseudo-labeling baselines, the evaluation metrics, and a JSON-driven CLI.
"""

from .bank import DynamicBank, PriorSet, estimate_priors, split_sub_banks, update_bank
from .classifier import ModelConfig, ModelParams, weighted_average
from .data import Dataset, FederationData, PartitionSpec, dirichlet_partition
from .federation import FedConfig, RoundLog, run_experiment, run_round, warmup
from .metrics import MetricReport, evaluate_model
from .numerics import RngStream
from .transition import TransitionContext, sub_bank_loss, sub_bank_loss_grad, transition

__all__ = [
    "Dataset",
    "DynamicBank",
    "FedConfig",
    "FederationData",
    "MetricReport",
    "ModelConfig",
    "ModelParams",
    "PartitionSpec",
    "PriorSet",
    "RngStream",
    "RoundLog",
    "TransitionContext",
    "dirichlet_partition",
    "estimate_priors",
    "evaluate_model",
    "run_experiment",
    "run_round",
    "split_sub_banks",
    "sub_bank_loss",
    "sub_bank_loss_grad",
    "transition",
    "update_bank",
    "warmup",
    "weighted_average",
]

__version__ = "0.1.0"
