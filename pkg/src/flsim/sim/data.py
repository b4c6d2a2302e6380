"""Synthetic federated datasets with a known ground-truth model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticDataSpec:
    """Per-device linear (or logistic) data around one shared parameter vector.

    Each device draws its own shift of the ground truth from ``Normal(0, heterogeneity)``;
    ``availability_bias`` adds a shift along the ground truth proportional to how often
    the device is available, which makes the sampled population skewed.
    """

    dim: int = 10
    model: str = "linear"  # or "logistic"
    examples_mean: float = 20.0
    examples_min: int = 1
    count_distribution: str = "poisson"  # or "fixed"
    heterogeneity: float = 0.0
    noise: float = 0.1
    availability_bias: float = 0.0
    holdout_examples: int = 2_000
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidSpec("dim must be positive")
        if self.model not in ("linear", "logistic"):
            raise InvalidSpec(f"unknown model {self.model!r}")
        if self.count_distribution not in ("poisson", "fixed"):
            raise InvalidSpec(f"unknown count distribution {self.count_distribution!r}")
        if self.examples_mean <= 0 or self.examples_min < 0:
            raise InvalidSpec("example counts must be positive")
        if self.heterogeneity < 0 or self.noise < 0:
            raise InvalidSpec("spreads must be non-negative")

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "SyntheticDataSpec":
        d = dict(d or {})
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None


@dataclass(frozen=True, eq=False)
class FederatedData:
    w_star: np.ndarray
    shards: tuple  # per device: (X, y)
    holdout: tuple  # (X, y)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.vstack([s[0] for s in self.shards])
        y = np.concatenate([s[1] for s in self.shards])
        return X, y


def _labels(spec: SyntheticDataSpec, X: np.ndarray, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = X @ w + spec.noise * rng.standard_normal(len(X))
    if spec.model == "linear":
        return z
    return (rng.random(len(X)) < 1.0 / (1.0 + np.exp(-z))).astype(np.float64)


def generate_data(
    spec: SyntheticDataSpec, n_devices: int, seed: int, propensity: Optional[np.ndarray] = None
) -> FederatedData:
    """Deterministic under ``seed``. ``propensity`` (per device, in [0, 1]) drives the bias probe."""
    if n_devices < 1:
        raise InvalidSpec("need at least one device")
    rng = np.random.default_rng([seed, 0xDA7A])
    w_star = rng.standard_normal(spec.dim)
    if spec.count_distribution == "fixed":
        counts = np.full(n_devices, int(round(spec.examples_mean)))
    else:
        counts = rng.poisson(spec.examples_mean, n_devices)
    counts = np.maximum(counts, spec.examples_min)
    if propensity is None:
        propensity = np.full(n_devices, 0.5)
    unit = w_star / np.linalg.norm(w_star)
    shards = []
    for i in range(n_devices):
        shift = spec.heterogeneity * rng.standard_normal(spec.dim)
        shift = shift + spec.availability_bias * (float(propensity[i]) - 0.5) * unit
        X = rng.standard_normal((int(counts[i]), spec.dim))
        shards.append((X, _labels(spec, X, w_star + shift, rng)))
    Xh = rng.standard_normal((spec.holdout_examples, spec.dim))
    return FederatedData(w_star, tuple(shards), (Xh, _labels(spec, Xh, w_star, rng)))
