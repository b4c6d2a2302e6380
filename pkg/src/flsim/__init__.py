"""Discrete-event simulation of a synchronous federated learning system."""

__version__ = "0.1.0"

from .estimator import FedAvgClassifier, FedAvgRegressor  # noqa: E402
from .fedavg import (  # noqa: E402
    AggregateState,
    ModelParams,
    ModelUpdate,
    absorb_update,
    client_update,
    evaluate,
    finalize_round,
    merge_aggregates,
)

__all__ = [
    "AggregateState",
    "FedAvgClassifier",
    "FedAvgRegressor",
    "ModelParams",
    "ModelUpdate",
    "__version__",
    "absorb_update",
    "client_update",
    "evaluate",
    "finalize_round",
    "merge_aggregates",
]
