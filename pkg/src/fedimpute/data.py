"""Masked tabular data: a float64 matrix plus a boolean observedness mask.

The mask is True where a cell is observed. Values at missing cells are
canonicalized to 0.0 so the matrix can feed the zero-imputation encoder
without further preparation.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError


class MaskedMatrix:
    """Row-major numeric table plus observedness mask; immutable by convention."""

    __slots__ = ("values", "mask")

    def __init__(self, values: np.ndarray, mask: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if values.ndim != 2:
            raise DimensionError(f"values must be 2-d, got shape {values.shape}")
        if mask.shape != values.shape:
            raise DimensionError(
                f"mask shape {mask.shape} does not match values shape {values.shape}"
            )
        if not np.isfinite(values[mask]).all():
            bad = np.argwhere(~np.isfinite(values) & mask)[0]
            raise DataError(f"non-finite observed value at row {bad[0]}, col {bad[1]}")
        self.values = np.where(mask, values, 0.0)
        self.mask = mask

    @classmethod
    def complete(cls, values: np.ndarray) -> "MaskedMatrix":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def missing_fraction(self) -> float:
        return float(1.0 - self.mask.mean()) if self.mask.size else 0.0

    def rows_fully_missing(self) -> np.ndarray:
        return ~self.mask.any(axis=1)

    def subset(self, row_idx: np.ndarray) -> "MaskedMatrix":
        return MaskedMatrix(self.values[row_idx], self.mask[row_idx])

    def __repr__(self) -> str:
        n, p = self.shape
        return f"MaskedMatrix({n}x{p}, {self.missing_fraction():.1%} missing)"
