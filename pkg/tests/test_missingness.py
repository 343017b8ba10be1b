import numpy as np
import pytest
from scipy.stats import chi2_contingency, pointbiserialr

from fedimpute.datasets import SyntheticSpec, gen_synthetic
from fedimpute.errors import ConfigError, DataError
from fedimpute.missingness import (MaskSpec, generate_mask, load_mask,
                                   mar_mask, mask_weights, mcar_mask,
                                   mnar_mask, pivot_indices, save_mask)


def synthetic_1000x130(seed=0):
    spec = SyntheticSpec(n_samples=1000, n_features=130, latent_rank=8,
                         class_proportions=(650, 350), seed=seed)
    return gen_synthetic(spec)[0]


class TestMcar:
    def test_rate_limit_nearly_all_observed(self):
        mask = mcar_mask((100, 10), 1e-9, np.random.default_rng(0))
        assert mask.sum() >= 999  # out of 1000 cells

    def test_rate_concentration(self):
        mask = mcar_mask((1000, 130), 0.3, np.random.default_rng(1))
        missing = 1.0 - mask.mean()
        assert abs(missing - 0.3) < 0.02

    def test_independent_of_data(self):
        # chi-square of mask vs a median split of a data column must not
        # reject independence; median p over 20 seeds
        data = synthetic_1000x130()
        col = data[:, 5] > np.median(data[:, 5])
        pvals = []
        for s in range(20):
            mask = mcar_mask(data.shape, 0.3, np.random.default_rng(100 + s))
            table = np.array([
                [np.sum(mask[col, 7]), np.sum(~mask[col, 7])],
                [np.sum(mask[~col, 7]), np.sum(~mask[~col, 7])],
            ])
            pvals.append(chi2_contingency(table).pvalue)
        assert np.median(pvals) > 0.01

    def test_row_repair(self):
        # tiny width and high rate would otherwise leave empty rows
        mask = mcar_mask((500, 2), 0.9, np.random.default_rng(2))
        assert mask.any(axis=1).all()

    def test_rate_validation(self):
        with pytest.raises(ConfigError):
            mcar_mask((5, 5), 0.0, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            mcar_mask((5, 5), 1.0, np.random.default_rng(0))

    def test_seeded_determinism(self):
        a = mcar_mask((50, 8), 0.3, np.random.default_rng(7))
        b = mcar_mask((50, 8), 0.3, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)


class TestMar:
    def test_zero_weights_reduce_to_mcar(self):
        # with weight_scale 0 every maskable feature is i.i.d. Bernoulli
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mar", rate=0.3, weight_scale=0.0)
        mask = mar_mask(data, spec, np.random.default_rng(3))
        pivots = pivot_indices(data.shape[1], spec)
        maskable = np.setdiff1d(np.arange(data.shape[1]), pivots)
        missing = 1.0 - mask[:, maskable].mean()
        assert abs(missing - 0.3) < 0.02
        # independence against a pivot median split on one maskable feature
        piv = data[:, pivots[0]] > np.median(data[:, pivots[0]])
        j = maskable[0]
        table = np.array([
            [np.sum(mask[piv, j]), np.sum(~mask[piv, j])],
            [np.sum(mask[~piv, j]), np.sum(~mask[~piv, j])],
        ])
        assert chi2_contingency(table).pvalue > 0.01

    def test_rate_calibration(self):
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mar", rate=0.3)
        mask = mar_mask(data, spec, np.random.default_rng(4))
        pivots = pivot_indices(data.shape[1], spec)
        maskable = np.setdiff1d(np.arange(data.shape[1]), pivots)
        missing = 1.0 - mask[:, maskable].mean()
        assert abs(missing - 0.3) < 0.02

    def test_pivots_fully_observed(self):
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mar", rate=0.3)
        mask = mar_mask(data, spec, np.random.default_rng(5))
        pivots = pivot_indices(data.shape[1], spec)
        assert mask[:, pivots].all()
        assert pivots.size == int(np.ceil(0.3 * 130))

    def test_dependence_on_strongest_pivot(self):
        # point-biserial correlation between missingness and the highest-|w|
        # pivot carries the sign of the weight; alpha 0.01 over 20 seeds
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mar", rate=0.3)
        pivots, maskable, weights = mask_weights(data.shape[1], spec)
        j_col = 0
        j = maskable[j_col]
        strongest = np.argmax(np.abs(weights[:, j_col]))
        sign = np.sign(weights[strongest, j_col])
        stats, pvals = [], []
        for s in range(20):
            mask = mar_mask(data, spec, np.random.default_rng(600 + s))
            r, p = pointbiserialr(~mask[:, j], data[:, pivots[strongest]])
            stats.append(r)
            pvals.append(p)
        assert np.median(pvals) < 0.01
        assert np.sign(np.median(stats)) == sign

    def test_no_fully_missing_rows(self):
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mar", rate=0.3)
        mask = mar_mask(data, spec, np.random.default_rng(6))
        assert mask.any(axis=1).all()

    def test_requires_complete_data(self):
        data = synthetic_1000x130().copy()
        data[0, 0] = np.nan
        with pytest.raises(DataError):
            mar_mask(data, MaskSpec(mechanism="mar"), np.random.default_rng(0))

    def test_seeded_determinism(self):
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mar", rate=0.3)
        a = mar_mask(data, spec, np.random.default_rng(8))
        b = mar_mask(data, spec, np.random.default_rng(8))
        np.testing.assert_array_equal(a, b)


class TestMnar:
    def test_zero_self_weight_equals_mar(self):
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mnar", rate=0.3, self_weight=0.0)
        a = mnar_mask(data, spec, np.random.default_rng(9))
        b = mar_mask(data, MaskSpec(mechanism="mar", rate=0.3),
                     np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_positive_self_weight_censors_large_values(self):
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mnar", rate=0.3, self_weight=5.0,
                        weight_scale=0.0)
        mask = mnar_mask(data, spec, np.random.default_rng(10))
        pivots = pivot_indices(data.shape[1], spec)
        maskable = np.setdiff1d(np.arange(data.shape[1]), pivots)
        gaps = []
        for j in maskable[:20]:
            gaps.append(data[mask[:, j], j].mean() - data[:, j].mean())
        assert np.median(gaps) < 0  # observed mean below true mean

    def test_rate_calibration(self):
        data = synthetic_1000x130()
        spec = MaskSpec(mechanism="mnar", rate=0.3)
        mask = mnar_mask(data, spec, np.random.default_rng(11))
        pivots = pivot_indices(data.shape[1], spec)
        maskable = np.setdiff1d(np.arange(data.shape[1]), pivots)
        missing = 1.0 - mask[:, maskable].mean()
        assert abs(missing - 0.3) < 0.02


class TestSpecAndIo:
    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            MaskSpec(mechanism="banana")
        with pytest.raises(ConfigError):
            MaskSpec(rate=1.5)
        with pytest.raises(ConfigError):
            MaskSpec(pivot_fraction=0.0)

    def test_dispatcher(self):
        data = synthetic_1000x130()
        for mech in ("mcar", "mar", "mnar"):
            mask = generate_mask(data, MaskSpec(mechanism=mech, rate=0.2),
                                 np.random.default_rng(1))
            assert mask.shape == data.shape

    def test_mask_csv_round_trip(self, tmp_path):
        mask = mcar_mask((12, 5), 0.4, np.random.default_rng(12))
        path = tmp_path / "mask.csv"
        save_mask(path, mask)
        np.testing.assert_array_equal(load_mask(path), mask)
