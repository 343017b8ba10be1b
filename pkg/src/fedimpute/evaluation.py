"""Imputation scoring: normalized MSE over artificially masked cells, and
posterior vs prior-predictive spread tables for multiple imputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MaskedMatrix
from .errors import ConfigError, DimensionError, EvaluationError
from .miwae import MiwaeModel, impute_multiple, prior_predictive_draws
from .rngutil import derive_rng


def normalized_mse(imputed: np.ndarray, truth: np.ndarray, eval_mask: np.ndarray,
                   mode: str = "global") -> float:
    """Mean squared error over eval_mask==True cells divided by the variance
    of the true values on those same cells.

    mode="global" pools every masked cell; mode="per_feature" normalizes
    each feature by its own masked-cell variance and averages the ratios.
    Never reads cells outside the mask.
    """
    imputed = np.asarray(imputed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    eval_mask = np.asarray(eval_mask, dtype=bool)
    if imputed.shape != truth.shape or eval_mask.shape != truth.shape:
        raise DimensionError(
            f"shape mismatch: imputed {imputed.shape}, truth {truth.shape}, "
            f"mask {eval_mask.shape}"
        )
    if not eval_mask.any():
        raise EvaluationError("no masked cells to score")
    if mode == "global":
        t = truth[eval_mask]
        err = imputed[eval_mask] - t
        var = float(t.var())
        if var <= 0.0:
            raise EvaluationError("true values are constant over all masked cells")
        return float(np.mean(err * err) / var)
    if mode == "per_feature":
        ratios = []
        for j in range(truth.shape[1]):
            col_mask = eval_mask[:, j]
            if not col_mask.any():
                continue
            t = truth[col_mask, j]
            var = float(t.var())
            if var <= 0.0:
                raise EvaluationError(f"true values are constant over masked cells of feature {j}")
            err = imputed[col_mask, j] - t
            ratios.append(float(np.mean(err * err) / var))
        if not ratios:
            raise EvaluationError("no masked cells to score")
        return float(np.mean(ratios))
    raise ConfigError(f"unknown normalization mode {mode!r}")


@dataclass
class MiSpread:
    """Per-cell and per-feature spread of posterior draws vs prior-predictive
    draws on the missing cells of one dataset."""

    cell_rows: np.ndarray  # row index of each missing cell
    cell_features: np.ndarray  # feature index of each missing cell
    posterior_std: np.ndarray  # std over m posterior draws, per cell
    prior_std: np.ndarray  # std over m prior-predictive draws, per cell
    n_draws: int
    degenerate: bool  # m == 1: spreads are 0 by convention

    def per_feature(self) -> list[dict]:
        """Median spreads per feature, over that feature's missing cells."""
        out = []
        for j in np.unique(self.cell_features):
            sel = self.cell_features == j
            out.append(
                {
                    "feature": int(j),
                    "n_missing": int(sel.sum()),
                    "posterior_std": float(np.median(self.posterior_std[sel])),
                    "prior_std": float(np.median(self.prior_std[sel])),
                }
            )
        return out

    def median_posterior_std(self) -> float:
        table = self.per_feature()
        return float(np.median([row["posterior_std"] for row in table]))

    def median_prior_std(self) -> float:
        table = self.per_feature()
        return float(np.median([row["prior_std"] for row in table]))


def mi_uncertainty(model: MiwaeModel, data: MaskedMatrix, l: int, m: int,
                   seed: int) -> MiSpread:
    """For every missing cell: std over m posterior draws (importance
    resampling) paired with std over m draws from the prior predictive
    (z ~ N(0, I) pushed through the decoder)."""
    if m < 1:
        raise ConfigError("m must be >= 1")
    rows, feats, post, prior = [], [], [], []
    for i in range(data.n_rows):
        mask = data.mask[i]
        missing = ~mask
        if not missing.any():
            continue
        draws = impute_multiple(
            model, data.values[i], mask, l, m, derive_rng(seed, "mi-post", i)
        )
        prior_draws = prior_predictive_draws(model, m, derive_rng(seed, "mi-prior", i))
        cols = np.flatnonzero(missing)
        rows.extend([i] * cols.size)
        feats.extend(cols.tolist())
        post.extend(draws.completions[:, cols].std(axis=0).tolist())
        prior.extend(prior_draws[:, cols].std(axis=0).tolist())
    return MiSpread(
        cell_rows=np.array(rows, dtype=int),
        cell_features=np.array(feats, dtype=int),
        posterior_std=np.array(post),
        prior_std=np.array(prior),
        n_draws=m,
        degenerate=(m == 1),
    )
