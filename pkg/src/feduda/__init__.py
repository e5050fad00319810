"""Desk-scale simulator of federated unsupervised domain adaptation for
identity embeddings: source pre-training, first-neighbor pseudo-labeling of
target clients, and backbone-averaging federation with a source-side
proximal constraint."""

from .clustering import Partition, cfinch, finch, kmeans, merge_pass, pairwise_fscore
from .evaluation import EvalReport, evaluate, identification_eval, verification_eval
from .federation import FederationConfig, aggregate, comm_cost, local_train, run_federation
from .model import BackboneParams, HeadParams, ModelParams, load_checkpoint, margin_loss_and_grads, save_checkpoint
from .pipeline import BENCHMARKS, LADDER, METHODS, ExperimentSpec, run_method, run_methods, sweep
from .synth import DomainSpec, LabeledDataset, generate_domain, partition_clients

__version__ = "0.1.0"

__all__ = [
    "BENCHMARKS",
    "BackboneParams",
    "DomainSpec",
    "EvalReport",
    "ExperimentSpec",
    "FederationConfig",
    "HeadParams",
    "LADDER",
    "LabeledDataset",
    "METHODS",
    "ModelParams",
    "Partition",
    "aggregate",
    "cfinch",
    "comm_cost",
    "evaluate",
    "finch",
    "generate_domain",
    "identification_eval",
    "kmeans",
    "load_checkpoint",
    "local_train",
    "margin_loss_and_grads",
    "merge_pass",
    "pairwise_fscore",
    "partition_clients",
    "run_federation",
    "run_method",
    "run_methods",
    "save_checkpoint",
    "sweep",
    "verification_eval",
]
