"""Reference imputers: per-feature mean fill and iterative chained
equations with ridge regressors.

Both are deterministic. ICE sweeps features in ascending index order,
refitting a ridge regression of each feature on all others (over the rows
where it is observed) and re-imputing its missing training cells from the
predictions; the fitted sweeps are replayed once on the target data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MaskedMatrix
from .errors import ConfigError, DimensionError, NumericError


@dataclass
class MeanImputer:
    """Per-feature means of observed training entries; 0 where a feature
    was never observed (sensible after standardization)."""

    means: np.ndarray

    @classmethod
    def fit(cls, train: MaskedMatrix) -> "MeanImputer":
        count = train.mask.sum(axis=0)
        total = train.values.sum(axis=0)
        means = np.where(count > 0, total / np.maximum(count, 1), 0.0)
        return cls(means=means)

    def impute(self, target: MaskedMatrix) -> np.ndarray:
        if target.n_cols != self.means.shape[0]:
            raise DimensionError(
                f"target has {target.n_cols} features, imputer has {self.means.shape[0]}"
            )
        return np.where(target.mask, target.values, self.means)


def mean_fit_impute(train: MaskedMatrix, target: MaskedMatrix) -> np.ndarray:
    return MeanImputer.fit(train).impute(target)


def _ridge_fit(x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Ridge with unpenalized intercept via centering."""
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    gram = xc.T @ xc
    gram[np.diag_indices_from(gram)] += lam
    beta = np.linalg.solve(gram, xc.T @ (y - y_mean))
    intercept = y_mean - x_mean @ beta
    return beta, float(intercept)


@dataclass
class IceImputer:
    """Chained-equations imputer; `sweeps` holds one list of per-feature
    (beta, intercept) regressions for every executed training sweep."""

    ridge_lambda: float = 1.0
    max_sweeps: int = 10
    tol: float = 1e-3
    means: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sweeps: list[list[tuple[np.ndarray, float] | None]] = field(default_factory=list)

    @classmethod
    def fit(cls, train: MaskedMatrix, ridge_lambda: float = 1.0, max_sweeps: int = 10,
            tol: float = 1e-3) -> "IceImputer":
        if ridge_lambda <= 0:
            raise ConfigError("ridge_lambda must be positive")
        if max_sweeps < 1:
            raise ConfigError("max_sweeps must be >= 1")
        imp = cls(ridge_lambda=ridge_lambda, max_sweeps=max_sweeps, tol=tol)
        imp.means = MeanImputer.fit(train).means
        n, p = train.shape
        completed = np.where(train.mask, train.values, imp.means)
        others = [np.delete(np.arange(p), j) for j in range(p)]
        for _ in range(max_sweeps):
            sweep: list[tuple[np.ndarray, float] | None] = []
            max_change = 0.0
            for j in range(p):
                obs = train.mask[:, j]
                if obs.sum() < 2:
                    sweep.append(None)
                    continue
                beta, intercept = _ridge_fit(
                    completed[np.ix_(obs, others[j])], completed[obs, j], ridge_lambda
                )
                sweep.append((beta, intercept))
                miss = ~obs
                if miss.any():
                    pred = completed[np.ix_(miss, others[j])] @ beta + intercept
                    if not np.isfinite(pred).all():
                        raise NumericError(f"ICE produced non-finite values for feature {j}")
                    change = np.abs(pred - completed[miss, j]).max(initial=0.0)
                    max_change = max(max_change, float(change))
                    completed[miss, j] = pred
            imp.sweeps.append(sweep)
            if max_change < tol:
                break
        return imp

    def impute(self, target: MaskedMatrix) -> np.ndarray:
        p = self.means.shape[0]
        if target.n_cols != p:
            raise DimensionError(
                f"target has {target.n_cols} features, imputer has {p}"
            )
        completed = np.where(target.mask, target.values, self.means)
        others = [np.delete(np.arange(p), j) for j in range(p)]
        for sweep in self.sweeps:
            for j, fit in enumerate(sweep):
                if fit is None:
                    continue
                miss = ~target.mask[:, j]
                if not miss.any():
                    continue
                beta, intercept = fit
                completed[miss, j] = completed[np.ix_(miss, others[j])] @ beta + intercept
        if not np.isfinite(completed).all():
            raise NumericError("ICE imputation produced non-finite values")
        return completed


def ice_fit_impute(train: MaskedMatrix, target: MaskedMatrix, ridge_lambda: float = 1.0,
                   max_sweeps: int = 10, tol: float = 1e-3) -> np.ndarray:
    return IceImputer.fit(train, ridge_lambda, max_sweeps, tol).impute(target)
