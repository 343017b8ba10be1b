"""Mask simulation for MCAR, MAR and (generation-only) MNAR mechanisms.

Masks are boolean matrices with True = observed. MAR/MNAR use logistic
missingness scores driven by a fully observed pivot subset of features,
with per-feature intercepts calibrated by bisection so each maskable
feature hits the target missing rate in expectation. Row repair guarantees
that no generated mask leaves a row fully missing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import CalibrationError, ConfigError, DataError
from .rngutil import derive_rng

_MAX_BISECT = 200
_MAX_ROW_REDRAWS = 100


@dataclass(frozen=True)
class MaskSpec:
    """Mechanism and calibration knobs for mask generation."""

    mechanism: str = "mcar"
    rate: float = 0.30
    pivot_fraction: float = 0.3
    weight_seed: int = 0
    tolerance: float = 1e-3
    weight_scale: float = 1.0
    self_weight: float = 1.0  # MNAR only: coefficient of the feature's own value

    def __post_init__(self) -> None:
        if self.mechanism not in ("mcar", "mar", "mnar"):
            raise ConfigError(f"unknown mechanism {self.mechanism!r}")
        if not 0.0 < self.rate < 1.0:
            raise ConfigError(f"rate must lie in (0, 1), got {self.rate}")
        if not 0.0 < self.pivot_fraction < 1.0:
            raise ConfigError("pivot_fraction must lie in (0, 1)")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")


def mcar_mask(shape: tuple[int, int], rate: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli(rate) missingness per cell, with row repair."""
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"rate must lie in (0, 1), got {rate}")
    n, p = shape
    observed = rng.random((n, p)) >= rate
    for i in np.flatnonzero(~observed.any(axis=1)):
        for _ in range(_MAX_ROW_REDRAWS):
            row = rng.random(p) >= rate
            if row.any():
                observed[i] = row
                break
        else:
            observed[i] = False
            observed[i, rng.integers(p)] = True
    return observed


def _pivot_design(p: int, spec: MaskSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared MAR/MNAR design: pivot feature indices and logistic weights,
    both drawn from the spec's weight seed so every client sees the same
    mechanism."""
    n_pivot = math.ceil(spec.pivot_fraction * p)
    if n_pivot >= p:
        raise ConfigError("pivot_fraction leaves no maskable features")
    rng_w = derive_rng(spec.weight_seed, "mask-design")
    pivots = np.sort(rng_w.choice(p, size=n_pivot, replace=False))
    maskable = np.setdiff1d(np.arange(p), pivots)
    weights = rng_w.standard_normal((n_pivot, maskable.size)) * spec.weight_scale
    return pivots, maskable, weights


def _calibrate_intercept(scores: np.ndarray, rate: float, tol: float) -> float:
    """Bisection on b so that mean(sigmoid(scores + b)) == rate within tol."""
    span = float(np.abs(scores).max(initial=0.0))
    lo = -span - 50.0
    hi = span + 50.0
    for _ in range(_MAX_BISECT):
        mid = 0.5 * (lo + hi)
        realized = float(expit(scores + mid).mean())
        if abs(realized - rate) <= tol:
            return mid
        if realized < rate:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"intercept bisection did not reach rate {rate} within {_MAX_BISECT} iterations"
    )


def _logistic_mask(data: np.ndarray, spec: MaskSpec, rng: np.random.Generator,
                   self_weight: float) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ConfigError("mask generation needs a 2-d data matrix")
    if not np.isfinite(data).all():
        raise DataError("mask generation requires complete, finite data")
    n, p = data.shape
    pivots, maskable, weights = _pivot_design(p, spec)
    observed = np.ones((n, p), dtype=bool)
    base_scores = data[:, pivots] @ weights
    for col, j in enumerate(maskable):
        scores = base_scores[:, col]
        if self_weight != 0.0:
            scores = scores + self_weight * data[:, j]
        b = _calibrate_intercept(scores, spec.rate, spec.tolerance)
        prob_missing = expit(scores + b)
        observed[:, j] = rng.random(n) >= prob_missing
    return observed


def mar_mask(data: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Missing-at-random mask: missingness of each maskable feature depends
    on the always-observed pivot features through a logistic score."""
    return _logistic_mask(data, spec, rng, self_weight=0.0)


def mnar_mask(data: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Self-censoring variant: the feature's own value also enters its score.
    Generation only; downstream handling of MNAR data is out of scope."""
    return _logistic_mask(data, spec, rng, self_weight=spec.self_weight)


def generate_mask(data: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.mechanism == "mcar":
        return mcar_mask(np.asarray(data).shape, spec.rate, rng)
    if spec.mechanism == "mar":
        return mar_mask(data, spec, rng)
    return mnar_mask(data, spec, rng)


def pivot_indices(n_features: int, spec: MaskSpec) -> np.ndarray:
    """The always-observed pivot features implied by a MAR/MNAR spec."""
    pivots, _, _ = _pivot_design(n_features, spec)
    return pivots


def mask_weights(n_features: int, spec: MaskSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pivots, maskable, weights) of the logistic design, for diagnostics."""
    return _pivot_design(n_features, spec)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a mask as 0/1 CSV (1 = observed)."""
    np.savetxt(path, np.asarray(mask, dtype=int), fmt="%d", delimiter=",")


def load_mask(path) -> np.ndarray:
    raw = np.loadtxt(path, delimiter=",", dtype=int)
    if raw.ndim == 1:
        raw = raw[None, :]
    return raw.astype(bool)
