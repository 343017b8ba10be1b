import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm, ttest_rel

from fedimpute import numcore as nc
from fedimpute.data import MaskedMatrix
from fedimpute.errors import DataError, NumericError
from fedimpute.fedstd import GlobalScaler
from fedimpute.miwae import (MiwaeConfig, MiwaeModel, bound_with_gradient,
                             impute_dataset, impute_multiple, impute_single,
                             load_model, miwae_bound, prior_predictive_draws,
                             save_model)


def tiny_model(p=2, d=1, h=4, k=2, seed=0, decoder="gaussian"):
    cfg = MiwaeConfig(n_features=p, latent_dim=d, hidden_units=h, k_train=k,
                      l_test=16, decoder=decoder)
    return MiwaeModel.init(cfg, np.random.default_rng(seed))


def oracle_bound(model, values, mask, k, eps):
    """Straight-line reimplementation of the importance-weighted loss from
    scipy log-densities, without the log-ratio simplification the production
    path uses."""
    n = values.shape[0]
    x0 = np.where(mask, values, 0.0)
    mu_z, sig_z = model.encode(x0)
    per_row = []
    for i in range(n):
        lw = []
        for kk in range(k):
            e = eps[i * k + kk]
            z = mu_z[i] + sig_z[i] * e
            decoded = model.decode(z[None, :])
            mu_x, sig_x = decoded[0][0], decoded[1][0]
            ll = float(norm.logpdf(values[i][mask[i]], mu_x[mask[i]],
                                   sig_x[mask[i]]).sum())
            lp = float(norm.logpdf(z, 0.0, 1.0).sum())
            lq = float(norm.logpdf(z, mu_z[i], sig_z[i]).sum())
            lw.append(ll + lp - lq)
        per_row.append(logsumexp(lw) - np.log(k))
    return -float(np.mean(per_row))


class TestBound:
    def test_fully_observed_k1_equals_elbo(self):
        # with an all-true mask and K=1 the loss is the plain ELBO estimate
        model = tiny_model(p=3, d=2, h=5, seed=1)
        rng = np.random.default_rng(0)
        values = rng.standard_normal((4, 3))
        batch = MaskedMatrix.complete(values)
        seed = 77
        loss = float(miwae_bound(model, batch, 1, np.random.default_rng(seed)))
        eps = np.random.default_rng(seed).standard_normal((4, 2))
        mu_z, sig_z = model.encode(values)
        elbo_terms = []
        for i in range(4):
            z = mu_z[i] + sig_z[i] * eps[i]
            mu_x, sig_x = (arr[0] for arr in model.decode(z[None, :]))
            ll = norm.logpdf(values[i], mu_x, sig_x).sum()
            kl_sample = norm.logpdf(z, 0, 1).sum() - norm.logpdf(z, mu_z[i], sig_z[i]).sum()
            elbo_terms.append(ll + kl_sample)
        np.testing.assert_allclose(loss, -np.mean(elbo_terms), rtol=1e-10)

    def test_single_row_scalar_oracle(self):
        # p=2 with one coordinate missing, d=1, K=2, pinned draws
        model = tiny_model(p=2, d=1, h=4, seed=3)
        values = np.array([[0.4, -1.3]])
        mask = np.array([[True, False]])
        batch = MaskedMatrix(values, mask)
        seed = 123
        loss = float(miwae_bound(model, batch, 2, np.random.default_rng(seed)))
        eps = np.random.default_rng(seed).standard_normal((2, 1))
        np.testing.assert_allclose(loss, oracle_bound(model, values, mask, 2, eps),
                                   rtol=1e-10)

    def test_multirow_oracle(self):
        model = tiny_model(p=4, d=2, h=5, seed=5)
        rng = np.random.default_rng(9)
        values = rng.standard_normal((5, 4))
        mask = rng.random((5, 4)) > 0.4
        mask[:, 0] = True
        batch = MaskedMatrix(values, mask)
        seed = 55
        loss = float(miwae_bound(model, batch, 3, np.random.default_rng(seed)))
        eps = np.random.default_rng(seed).standard_normal((15, 2))
        np.testing.assert_allclose(loss, oracle_bound(model, values, mask, 3, eps),
                                   rtol=1e-10)

    def test_student_t_decoder_bound(self):
        # finite, deterministic, and strictly different from the Gaussian
        # bound for the same parameters
        model_t = tiny_model(p=4, d=2, h=5, seed=5, decoder="student_t")
        rng = np.random.default_rng(9)
        values = rng.standard_normal((5, 4))
        mask = rng.random((5, 4)) > 0.4
        mask[:, 0] = True
        batch = MaskedMatrix(values, mask)
        a = float(miwae_bound(model_t, batch, 3, np.random.default_rng(8)))
        b = float(miwae_bound(model_t, batch, 3, np.random.default_rng(8)))
        assert np.isfinite(a) and a == b

    def test_k20_bound_tighter_than_k1(self):
        # the K-sample bound dominates the 1-sample bound in expectation;
        # paired one-sided test over 200 seeds at significance 0.01
        model = tiny_model(p=3, d=2, h=4, seed=7)
        rng = np.random.default_rng(1)
        values = rng.standard_normal((6, 3))
        mask = rng.random((6, 3)) > 0.35
        mask[:, 1] = True
        batch = MaskedMatrix(values, mask)
        l1, l20 = [], []
        for s in range(200):
            l1.append(float(miwae_bound(model, batch, 1, np.random.default_rng(1000 + s))))
            l20.append(float(miwae_bound(model, batch, 20, np.random.default_rng(5000 + s))))
        res = ttest_rel(l1, l20, alternative="greater")
        assert np.mean(l20) < np.mean(l1)
        assert res.pvalue < 0.01

    def test_zero_observed_row_rejected(self):
        model = tiny_model()
        values = np.array([[1.0, 2.0], [0.5, 0.5]])
        mask = np.array([[True, True], [False, False]])
        batch = MaskedMatrix(values, mask)
        with pytest.raises(DataError, match="row 1"):
            miwae_bound(model, batch, 2, np.random.default_rng(0))

    def test_finite_for_extreme_parameters(self):
        model = tiny_model(p=3, d=2, h=4, seed=11)
        big = nc.ParamVector(model.params.values * 50.0, model.params.layout)
        model = MiwaeModel(model.config, big)
        rng = np.random.default_rng(2)
        values = rng.standard_normal((4, 3)) * 10
        mask = rng.random((4, 3)) > 0.3
        mask[:, 0] = True
        loss = float(miwae_bound(model, MaskedMatrix(values, mask), 4,
                                 np.random.default_rng(0)))
        assert np.isfinite(loss)

    def test_seeded_determinism(self):
        model = tiny_model(p=3, d=2, h=4, seed=13)
        rng = np.random.default_rng(3)
        values = rng.standard_normal((5, 3))
        mask = rng.random((5, 3)) > 0.3
        mask[:, 0] = True
        batch = MaskedMatrix(values, mask)
        a = float(miwae_bound(model, batch, 5, np.random.default_rng(42)))
        b = float(miwae_bound(model, batch, 5, np.random.default_rng(42)))
        assert a == b


class TestBoundGradient:
    """Bound gradients vs central finite differences on tiny instances."""

    @pytest.mark.parametrize("trial", range(5))
    def test_gradient_matches_finite_differences(self, trial):
        rng = np.random.default_rng(300 + trial)
        p = int(rng.integers(2, 6))
        d = int(rng.integers(1, 3))
        n = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        cfg = MiwaeConfig(n_features=p, latent_dim=d, hidden_units=4, k_train=k,
                          l_test=8)
        model = MiwaeModel.init(cfg, rng)
        values = rng.standard_normal((n, p))
        mask = rng.random((n, p)) > 0.3
        mask[:, 0] = True
        batch = MaskedMatrix(values, mask)
        seed = 900 + trial

        _, grad = bound_with_gradient(model, batch, k, np.random.default_rng(seed))

        theta0 = model.params.values
        fd = np.zeros_like(theta0)
        h = 1e-5
        for i in range(theta0.size):
            tp = theta0.copy(); tp[i] += h
            tm = theta0.copy(); tm[i] -= h
            lp = miwae_bound(MiwaeModel(cfg, nc.ParamVector(tp, cfg.layout())),
                             batch, k, np.random.default_rng(seed))
            lm = miwae_bound(MiwaeModel(cfg, nc.ParamVector(tm, cfg.layout())),
                             batch, k, np.random.default_rng(seed))
            fd[i] = (float(lp) - float(lm)) / (2 * h)
        rel = np.abs(grad.values - fd) / np.maximum(1e-6, np.abs(fd))
        assert rel.max() < 1e-4


def sigma_floor_model(p=2, d=1):
    """Decoder whose output std sits exactly on the 1e-3 floor: all-zero
    parameters except a large negative bias on the raw-std columns."""
    cfg = MiwaeConfig(n_features=p, latent_dim=d, hidden_units=4, k_train=2, l_test=8)
    layout = cfg.layout()
    params = nc.ParamVector(np.zeros(layout.size), layout)
    bias = params.segment("dec.b2")
    bias[p:] = -40.0  # softplus(-40) ~ 4e-18
    return MiwaeModel(cfg, params)


class TestImputeSingle:
    def test_fully_observed_row_returned_exactly(self):
        model = tiny_model(p=3, d=2)
        row = np.array([0.1, -0.2, 0.3])
        out = impute_single(model, row, np.ones(3, dtype=bool), 5,
                            np.random.default_rng(0))
        np.testing.assert_array_equal(out, row)

    def test_l1_returns_decoder_mean(self):
        model = tiny_model(p=2, d=1, seed=21)
        values = np.array([0.7, 0.0])
        mask = np.array([True, False])
        seed = 31
        out = impute_single(model, values, mask, 1, np.random.default_rng(seed))
        eps = np.random.default_rng(seed).standard_normal((1, 1))
        mu_z, sig_z = model.encode(np.where(mask, values, 0.0)[None, :])
        z = mu_z + sig_z * eps
        mu_x = model.decode(z)[0]
        np.testing.assert_allclose(out[1], mu_x[0, 1], rtol=1e-12)
        assert out[0] == values[0]

    def test_l3_matches_hand_computed_weights(self):
        # independent script: weights from scipy log-densities, then the
        # self-normalized average of decoder means on the missing coordinate
        model = tiny_model(p=2, d=1, seed=23)
        values = np.array([1.1, 0.0])
        mask = np.array([True, False])
        seed = 97
        out = impute_single(model, values, mask, 3, np.random.default_rng(seed))

        eps = np.random.default_rng(seed).standard_normal((3, 1))
        x0 = np.where(mask, values, 0.0)
        mu_z, sig_z = model.encode(x0[None, :])
        lw, mus = [], []
        for l in range(3):
            z = mu_z[0] + sig_z[0] * eps[l]
            mu_x, sig_x = (arr[0] for arr in model.decode(z[None, :]))
            ll = float(norm.logpdf(values[0], mu_x[0], sig_x[0]))
            lp = float(norm.logpdf(z, 0, 1).sum())
            lq = float(norm.logpdf(z, mu_z[0], sig_z[0]).sum())
            lw.append(ll + lp - lq)
            mus.append(mu_x[1])
        w = np.exp(np.array(lw) - logsumexp(lw))
        np.testing.assert_allclose(out[1], float(w @ np.array(mus)), rtol=1e-10)

    def test_row_without_observations_rejected(self):
        model = tiny_model()
        with pytest.raises(DataError):
            impute_single(model, np.zeros(2), np.zeros(2, dtype=bool), 4,
                          np.random.default_rng(0))


class TestImputeMultiple:
    def test_thirty_draws_keep_observed_constant(self):
        model = tiny_model(p=4, d=2, seed=29)
        values = np.array([0.2, -0.4, 0.0, 0.9])
        mask = np.array([True, True, False, True])
        draws = impute_multiple(model, values, mask, 16, 30, np.random.default_rng(0))
        assert draws.completions.shape == (30, 4)
        for j in np.flatnonzero(mask):
            assert np.all(draws.completions[:, j] == values[j])
        assert abs(draws.weights.sum() - 1.0) < 1e-9

    def test_sigma_floor_sampling(self):
        model = sigma_floor_model()
        values = np.array([0.5, 0.0])
        mask = np.array([True, False])
        rng = np.random.default_rng(5)
        draws = impute_multiple(model, values, mask, 1, 1000, rng)
        mu = model.decode(np.zeros((1, 1)))[0][0, 1]  # zero params: z irrelevant
        spread = draws.completions[:, 1] - mu
        assert np.abs(spread).max() < 5 * 1e-3 * 5  # well inside 5 sigma with slack
        std = draws.completions[:, 1].std()
        assert 0.5e-3 < std < 2e-3

    def test_determinism(self):
        model = tiny_model(p=3, d=1, seed=31)
        values = np.array([0.1, 0.0, -0.7])
        mask = np.array([True, False, True])
        a = impute_multiple(model, values, mask, 8, 10, np.random.default_rng(3))
        b = impute_multiple(model, values, mask, 8, 10, np.random.default_rng(3))
        np.testing.assert_array_equal(a.completions, b.completions)


class TestImputeDataset:
    def test_all_observed_identity(self):
        model = tiny_model(p=3, d=1)
        values = np.random.default_rng(0).standard_normal((6, 3))
        data = MaskedMatrix.complete(values)
        out = impute_dataset(model, data, 4, seed=1)
        np.testing.assert_array_equal(out, values)

    def test_single_missing_cell_only_that_changes(self):
        model = tiny_model(p=3, d=1, seed=33)
        values = np.random.default_rng(1).standard_normal((4, 3))
        mask = np.ones((4, 3), dtype=bool)
        mask[2, 1] = False
        data = MaskedMatrix(values, mask)
        out = impute_dataset(model, data, 8, seed=2)
        diff = out != np.where(mask, values, 0.0)
        changed = np.argwhere(diff)
        assert changed.tolist() == [[2, 1]]
        assert np.isfinite(out).all()

    def test_row_order_independent_streams(self):
        # the same row index gets the same completion regardless of the
        # other rows present
        model = tiny_model(p=3, d=1, seed=35)
        rng = np.random.default_rng(4)
        values = rng.standard_normal((5, 3))
        mask = np.ones((5, 3), dtype=bool)
        mask[1, 2] = False
        mask[3, 0] = False
        full = impute_dataset(model, MaskedMatrix(values, mask), 6, seed=9)
        sub = impute_dataset(model, MaskedMatrix(values[:2], mask[:2]), 6, seed=9)
        np.testing.assert_array_equal(full[1], sub[1])


class TestPriorPredictive:
    def test_shapes_and_determinism(self):
        model = tiny_model(p=4, d=2, seed=41)
        a = prior_predictive_draws(model, 7, np.random.default_rng(0))
        b = prior_predictive_draws(model, 7, np.random.default_rng(0))
        assert a.shape == (7, 4)
        np.testing.assert_array_equal(a, b)


class TestSerialization:
    def test_round_trip_lossless(self, tmp_path):
        model = tiny_model(p=5, d=2, h=6, seed=43)
        path = tmp_path / "model.bin"
        save_model(model, path)
        loaded, scaler = load_model(path)
        assert scaler is None
        assert loaded.config == model.config
        np.testing.assert_array_equal(loaded.params.values, model.params.values)

    def test_scaler_travels_with_model(self, tmp_path):
        model = tiny_model(p=3, d=1, seed=45)
        scaler = GlobalScaler(mu=np.array([1.0, -2.0, 0.25]),
                              sigma=np.array([1.5, 2.0, 1.0]),
                              n=np.array([10.0, 9.0, 10.0]))
        path = tmp_path / "model.bin"
        save_model(model, path, scaler=scaler)
        _, loaded = load_model(path)
        np.testing.assert_array_equal(loaded.mu, scaler.mu)
        np.testing.assert_array_equal(loaded.sigma, scaler.sigma)
        np.testing.assert_array_equal(loaded.n, scaler.n)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError, match="not a fedimpute model"):
            load_model(path)

    def test_student_t_config_round_trip(self, tmp_path):
        model = tiny_model(p=3, d=2, seed=47, decoder="student_t")
        path = tmp_path / "t.bin"
        save_model(model, path)
        loaded, _ = load_model(path)
        assert loaded.config.decoder == "student_t"
        np.testing.assert_array_equal(loaded.params.values, model.params.values)
