"""Continual transfer of multi-agent communication topologies.

A bank of factorized topology priors is aligned to each new task with
entropic fused Gromov-Wasserstein transport, projected into the task's agent
space, and adapted through a sparse residual under a PAC-Bayes style
objective. A synthetic planted-topology harness measures forgetting.
"""

from .adaptation import TrainConfig, TransferParams, pac_bayes_bound, train_residual
from .fgw import AlignmentResult, Coupling, FgwConfig, GraphView, fgw_solve
from .graph_core import AttributedTopology, FeasibilityMask, TopologyError, WeightedTopology
from .harness import PipelineConfig, StreamConfig, generate_stream, run_continual
from .metrics import MetricsReport, compute_metrics
from .posterior import EdgePosterior, EdgeScores, RelaxationConfig, kl_divergence
from .prior_bank import AtomMetadata, PriorAtom, PriorBank, RetrievalConfig, consolidate, retrieve

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult",
    "AtomMetadata",
    "AttributedTopology",
    "Coupling",
    "EdgePosterior",
    "EdgeScores",
    "FeasibilityMask",
    "FgwConfig",
    "GraphView",
    "MetricsReport",
    "PipelineConfig",
    "PriorAtom",
    "PriorBank",
    "RelaxationConfig",
    "RetrievalConfig",
    "StreamConfig",
    "TopologyError",
    "TrainConfig",
    "TransferParams",
    "WeightedTopology",
    "compute_metrics",
    "consolidate",
    "fgw_solve",
    "generate_stream",
    "kl_divergence",
    "pac_bayes_bound",
    "retrieve",
    "run_continual",
    "train_residual",
]
