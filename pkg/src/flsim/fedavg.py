"""Federated Averaging over dense parameter vectors.

Clients return a weighted update ``(delta, n)`` where ``delta = n * (w_final - w_init)``
and ``n`` counts the minibatches processed. The server sums the weighted updates and
the weights, divides, and adds the average step to the current model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class FedAvgError(Exception):
    """Base class for errors raised by the FedAvg core."""


class EmptyDataset(FedAvgError):
    pass


class DimensionMismatch(FedAvgError):
    pass


class ZeroWeight(FedAvgError):
    pass


def _frozen_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_vector(self.weights, "weights"))
        if self.weights.size == 0:
            raise ValueError("model dimension must be positive")

    @property
    def dim(self) -> int:
        return int(self.weights.size)

    @classmethod
    def zeros(cls, dim: int) -> "ModelParams":
        return cls(np.zeros(dim))

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)


@dataclass(frozen=True, eq=False)
class ModelUpdate:
    delta: np.ndarray
    weight: int

    def __post_init__(self):
        object.__setattr__(self, "delta", _frozen_vector(self.delta, "delta"))
        if int(self.weight) != self.weight or self.weight < 0:
            raise ValueError("update weight must be a non-negative integer")
        object.__setattr__(self, "weight", int(self.weight))

    @property
    def dim(self) -> int:
        return int(self.delta.size)


@dataclass(frozen=True, eq=False)
class AggregateState:
    """Running sums of weighted updates and weights for one round."""

    weighted_sum: np.ndarray
    weight_sum: int = 0
    contributions: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weighted_sum", _frozen_vector(self.weighted_sum, "weighted_sum"))

    @classmethod
    def empty(cls, dim: int) -> "AggregateState":
        return cls(np.zeros(dim))

    @property
    def dim(self) -> int:
        return int(self.weighted_sum.size)


class LossKind(str, enum.Enum):
    LINEAR_REGRESSION_L2 = "linear_regression_l2"
    LOGISTIC_REGRESSION = "logistic_regression"


@dataclass(frozen=True)
class LossModel:
    """Per-example loss averaged over a batch, with its analytic gradient.

    ``linear_regression_l2`` uses ``0.5 * (w.x - y)**2``; ``logistic_regression``
    expects labels in {0, 1} and uses the negative log-likelihood.
    """

    kind: LossKind

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))

    def evaluate(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        z = X @ w
        if self.kind is LossKind.LINEAR_REGRESSION_L2:
            return float(np.mean(0.5 * (z - y) ** 2))
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def gradient(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        z = X @ w
        if self.kind is LossKind.LINEAR_REGRESSION_L2:
            r = z - y
        else:
            r = _sigmoid(z) - y
        return X.T @ r / len(y)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 1
    batch_size: int = 10
    eta: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.eta >= 0 and np.isfinite(self.eta)):
            raise ValueError("eta must be a finite non-negative number")


@dataclass(frozen=True)
class EvalResult:
    loss: float
    count: int


def _as_dataset(data) -> tuple[np.ndarray, np.ndarray]:
    X, y = data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if len(y) == 0:
        raise EmptyDataset("dataset has no examples")
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and labels disagree on example count")
    return X, y


def minibatch_count(n_examples: int, batch_size: int, epochs: int = 1) -> int:
    """Number of minibatches produced by the batching loop (last short batch kept)."""
    return epochs * -(-n_examples // batch_size)


def client_update(
    w: ModelParams,
    data,
    hyper: Hyperparams,
    loss: LossModel | str = LossKind.LINEAR_REGRESSION_L2,
) -> ModelUpdate:
    """Run local minibatch SGD from ``w`` and return the weighted update.

    Examples are reshuffled every epoch with a generator seeded from
    ``hyper.seed``, so identical data and hyperparameters give identical updates.
    """
    if not isinstance(loss, LossModel):
        loss = LossModel(loss)
    X, y = _as_dataset(data)
    if X.shape[1] != w.dim:
        raise DimensionMismatch(f"features have dim {X.shape[1]}, model has {w.dim}")
    rng = np.random.default_rng(hyper.seed)
    w_init = w.weights
    cur = w_init.copy()
    n = 0
    bs = hyper.batch_size
    for _ in range(hyper.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), bs):
            idx = order[start : start + bs]
            cur -= hyper.eta * loss.gradient(cur, X[idx], y[idx])
            n += 1
    return ModelUpdate(n * (cur - w_init), n)


def absorb_update(state: AggregateState, u: ModelUpdate) -> AggregateState:
    if u.dim != state.dim:
        raise DimensionMismatch(f"update has dim {u.dim}, aggregate has {state.dim}")
    return AggregateState(
        state.weighted_sum + u.delta,
        state.weight_sum + u.weight,
        state.contributions + 1,
    )


def merge_aggregates(a: AggregateState, b: AggregateState) -> AggregateState:
    """Combine two partial aggregates (used by hierarchical aggregation)."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"aggregates have dims {a.dim} and {b.dim}")
    return AggregateState(
        a.weighted_sum + b.weighted_sum,
        a.weight_sum + b.weight_sum,
        a.contributions + b.contributions,
    )


def finalize_round(state: AggregateState, w_t: ModelParams) -> ModelParams:
    """``w_{t+1} = w_t + weighted_sum / weight_sum``."""
    if state.dim != w_t.dim:
        raise DimensionMismatch(f"aggregate has dim {state.dim}, model has {w_t.dim}")
    if state.weight_sum <= 0:
        raise ZeroWeight("no weight absorbed; the round must be abandoned")
    return ModelParams(w_t.weights + state.weighted_sum / state.weight_sum)


def evaluate(w: ModelParams, data, loss: LossModel | str = LossKind.LINEAR_REGRESSION_L2) -> EvalResult:
    if not isinstance(loss, LossModel):
        loss = LossModel(loss)
    X, y = _as_dataset(data)
    if X.shape[1] != w.dim:
        raise DimensionMismatch(f"features have dim {X.shape[1]}, model has {w.dim}")
    return EvalResult(loss.evaluate(w.weights, X, y), int(len(y)))


def weighted_mean_loss(results: Sequence[EvalResult]) -> EvalResult:
    total = sum(r.count for r in results)
    if total == 0:
        raise EmptyDataset("no evaluated examples")
    return EvalResult(sum(r.loss * r.count for r in results) / total, total)


def fedavg_round(
    w_t: ModelParams,
    client_datasets: Sequence,
    hyper: Hyperparams,
    loss: LossModel | str = LossKind.LINEAR_REGRESSION_L2,
) -> ModelParams:
    """One in-memory round: every client trains from ``w_t``, then average."""
    state = AggregateState.empty(w_t.dim)
    for data in client_datasets:
        state = absorb_update(state, client_update(w_t, data, hyper, loss))
    return finalize_round(state, w_t)


@dataclass
class SGDTrace:
    params: ModelParams
    steps: int
    losses: list = field(default_factory=list)


def centralized_sgd(
    w0: ModelParams,
    data,
    steps: int,
    hyper: Hyperparams,
    loss: LossModel | str = LossKind.LINEAR_REGRESSION_L2,
) -> SGDTrace:
    """Minibatch SGD on pooled data for exactly ``steps`` gradient steps.

    Used as the centralized baseline that FedAvg is compared against.
    """
    if not isinstance(loss, LossModel):
        loss = LossModel(loss)
    X, y = _as_dataset(data)
    rng = np.random.default_rng(hyper.seed)
    cur = w0.weights.copy()
    done = 0
    bs = hyper.batch_size
    while done < steps:
        order = rng.permutation(len(y))
        for start in range(0, len(y), bs):
            if done >= steps:
                break
            idx = order[start : start + bs]
            cur -= hyper.eta * loss.gradient(cur, X[idx], y[idx])
            done += 1
    return SGDTrace(ModelParams(cur), done)
