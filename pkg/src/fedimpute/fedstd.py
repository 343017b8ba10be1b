"""Missingness-aware federated standardization in one communication round.

Clients upload per-feature sufficient statistics (count, sum, sum of
squares) computed over observed entries only; the server recombines them
into the exact pooled mean and population standard deviation and broadcasts
the result. Carrying sufficient statistics instead of (mean, std) pairs is
what makes the recombination exact for any partition of the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MaskedMatrix
from .errors import DataError, DimensionError

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class MomentSummary:
    """Per-feature (count, sum, sum of squares) over observed entries."""

    count: np.ndarray
    total: np.ndarray
    total_sq: np.ndarray

    def __post_init__(self) -> None:
        if not (self.count.shape == self.total.shape == self.total_sq.shape):
            raise DimensionError("moment summary arrays must share one shape")
        if (self.count < 0).any():
            raise DataError("negative observation count")
        if not (np.isfinite(self.total).all() and np.isfinite(self.total_sq).all()):
            raise DataError("non-finite moment sums")

    @property
    def n_features(self) -> int:
        return self.count.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "count": self.count.astype(int).tolist(),
            "sum": self.total.tolist(),
            "sumsq": self.total_sq.tolist(),
        }


@dataclass(frozen=True)
class GlobalScaler:
    """Pooled per-feature mean/std plus the pooled observed counts."""

    mu: np.ndarray
    sigma: np.ndarray
    n: np.ndarray

    def __post_init__(self) -> None:
        if not (self.mu.shape == self.sigma.shape == self.n.shape):
            raise DimensionError("scaler arrays must share one shape")
        if (self.sigma < SIGMA_FLOOR).any():
            raise DataError(f"scaler sigma below floor {SIGMA_FLOOR}")

    @property
    def n_features(self) -> int:
        return self.mu.shape[0]

    def to_json_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "n": self.n.tolist()}


def local_moments(data: MaskedMatrix) -> MomentSummary:
    """Per-feature sufficient statistics over the observed entries."""
    mask = data.mask
    # MaskedMatrix zeroes missing cells, so plain sums are masked sums
    return MomentSummary(
        count=mask.sum(axis=0).astype(np.float64),
        total=data.values.sum(axis=0),
        total_sq=(data.values * data.values).sum(axis=0),
    )


def aggregate_moments(summaries: list[MomentSummary]) -> GlobalScaler:
    """Exact pooled standardization parameters from client summaries.

    Uses population (divide-by-N) variance. Features with pooled count 0
    get mu=0, count 1 get mu equal to the single value; both get sigma=1.
    """
    if not summaries:
        raise DimensionError("need at least one moment summary")
    p = summaries[0].n_features
    for s in summaries:
        if s.n_features != p:
            raise DimensionError(
                f"summary width mismatch: {s.n_features} vs {p}"
            )
    count = np.sum([s.count for s in summaries], axis=0)
    total = np.sum([s.total for s in summaries], axis=0)
    total_sq = np.sum([s.total_sq for s in summaries], axis=0)

    mu = np.zeros(p)
    sigma = np.ones(p)
    seen = count > 0
    safe = np.where(seen, count, 1.0)
    mu = np.where(seen, total / safe, 0.0)
    enough = count > 1
    var = np.where(enough, total_sq / safe - mu * mu, 1.0)
    sigma = np.where(enough, np.sqrt(np.maximum(var, SIGMA_FLOOR**2)), 1.0)
    return GlobalScaler(mu=mu, sigma=sigma, n=count)


def apply_scaler(data: MaskedMatrix, scaler: GlobalScaler) -> MaskedMatrix:
    """Standardize observed entries; the mask is untouched."""
    if data.n_cols != scaler.n_features:
        raise DimensionError(
            f"data has {data.n_cols} features, scaler has {scaler.n_features}"
        )
    scaled = (data.values - scaler.mu) / scaler.sigma
    return MaskedMatrix(np.where(data.mask, scaled, 0.0), data.mask)


def invert_scaler(values: np.ndarray, scaler: GlobalScaler) -> np.ndarray:
    """Map standardized values back to the original units (x * sigma + mu)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != scaler.n_features:
        raise DimensionError(
            f"values have {values.shape[-1]} features, scaler has {scaler.n_features}"
        )
    return values * scaler.sigma + scaler.mu
