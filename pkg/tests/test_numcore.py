import numpy as np
import pytest

from fedimpute import numcore as nc
from fedimpute.errors import DimensionError, NumericError, UsageError


def make_layout():
    return nc.ParamLayout((("a", (2, 3)), ("b", (3,)), ("c", (1,))))


class TestParamLayout:
    def test_flatten_unflatten_round_trip(self):
        layout = make_layout()
        rng = np.random.default_rng(0)
        flat = rng.standard_normal(layout.size)
        parts = layout.unflatten(flat)
        assert set(parts) == {"a", "b", "c"}
        assert parts["a"].shape == (2, 3)
        back = layout.flatten(parts)
        np.testing.assert_array_equal(back, flat)

    def test_round_trip_many_layouts(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            n_seg = int(rng.integers(1, 6))
            segs = []
            for i in range(n_seg):
                if rng.random() < 0.5:
                    shape = (int(rng.integers(1, 5)),)
                else:
                    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
                segs.append((f"s{i}", shape))
            layout = nc.ParamLayout(tuple(segs))
            flat = rng.standard_normal(layout.size)
            np.testing.assert_array_equal(layout.flatten(layout.unflatten(flat)), flat)

    def test_segment_at(self):
        layout = make_layout()
        assert layout.segment_at(0) == "a"
        assert layout.segment_at(5) == "a"
        assert layout.segment_at(6) == "b"
        assert layout.segment_at(9) == "c"

    def test_duplicate_names_rejected(self):
        with pytest.raises(DimensionError):
            nc.ParamLayout((("a", (2,)), ("a", (3,))))

    def test_param_vector_length_checked(self):
        with pytest.raises(DimensionError):
            nc.ParamVector(np.zeros(5), make_layout())


class TestMlpForward:
    def test_zero_params_give_zero_output(self):
        widths = [3, 4, 2]
        theta = np.zeros(nc.mlp_param_count(widths))
        x = np.random.default_rng(0).standard_normal((5, 3))
        out = nc.mlp_forward(theta, x, widths)
        np.testing.assert_array_equal(out, np.zeros((5, 2)))

    def test_identity_single_layer(self):
        # widths [2, 2]: one linear layer, no activation on the final layer
        widths = [2, 2]
        theta = np.concatenate([np.eye(2).reshape(-1), np.zeros(2)])
        out = nc.mlp_forward(theta, np.array([[1.0, 2.0]]), widths)
        np.testing.assert_array_equal(out, np.array([[1.0, 2.0]]))

    def test_matches_scalar_by_scalar_oracle(self):
        # independent forward pass written with explicit scalar loops
        widths = [3, 4, 2]
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(nc.mlp_param_count(widths))
        x = np.ones((2, 3))

        def oracle(theta, x):
            pos = 0
            h = [list(row) for row in x]
            for layer in range(len(widths) - 1):
                a, b = widths[layer], widths[layer + 1]
                w = [[theta[pos + i * b + j] for j in range(b)] for i in range(a)]
                pos += a * b
                bias = [theta[pos + j] for j in range(b)]
                pos += b
                nxt = []
                for row in h:
                    out_row = []
                    for j in range(b):
                        s = bias[j]
                        for i in range(a):
                            s += row[i] * w[i][j]
                        if layer < len(widths) - 2:
                            s = np.tanh(s)
                        out_row.append(s)
                    nxt.append(out_row)
                h = nxt
            return np.array(h)

        np.testing.assert_allclose(
            nc.mlp_forward(theta, x, widths), oracle(theta, x), rtol=1e-12
        )

    def test_shape_errors_name_offenders(self):
        with pytest.raises(DimensionError, match="widths"):
            nc.mlp_forward(np.zeros(3), np.zeros((1, 2)), [2, 2])
        with pytest.raises(DimensionError, match="input"):
            nc.mlp_forward(np.zeros(nc.mlp_param_count([2, 2])), np.zeros((1, 3)), [2, 2])

    def test_traced_matches_untraced(self):
        widths = [3, 5, 2]
        rng = np.random.default_rng(2)
        theta = rng.standard_normal(nc.mlp_param_count(widths))
        x = rng.standard_normal((4, 3))
        tape = nc.GradTape()
        node = nc.mlp_forward(tape.leaf(theta), x, widths)
        np.testing.assert_array_equal(node.value, nc.mlp_forward(theta, x, widths))


class TestBackward:
    def test_sum_of_parameters_gives_ones(self):
        tape = nc.GradTape()
        w = tape.leaf(np.arange(6, dtype=float))
        loss = nc.reduce_sum(w)
        np.testing.assert_array_equal(tape.gradient(loss, w), np.ones(6))

    def test_least_squares_closed_form(self):
        # loss = 0.5 * ||x W - y||^2  =>  dL/dW = x^T (x W - y)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 2))
        w0 = rng.standard_normal((3, 2))
        tape = nc.GradTape()
        w = tape.leaf(w0.reshape(-1))
        w_mat = nc.reshape(w, (3, 2))
        resid = nc.add(nc.matmul(x, w_mat), -y)
        loss = nc.mul(nc.reduce_sum(nc.square(resid)), 0.5)
        grad = tape.gradient(loss, w).reshape(3, 2)
        np.testing.assert_allclose(grad, x.T @ (x @ w0 - y), rtol=1e-12)

    def test_foreign_loss_rejected(self):
        tape_a, tape_b = nc.GradTape(), nc.GradTape()
        w = tape_a.leaf(np.ones(2))
        loss = nc.reduce_sum(w)
        with pytest.raises(UsageError):
            tape_b.gradient(loss)

    def test_nonscalar_loss_rejected(self):
        tape = nc.GradTape()
        w = tape.leaf(np.ones(3))
        with pytest.raises(UsageError):
            tape.gradient(nc.square(w), w)

    def test_unused_leaf_gets_zero_gradient(self):
        tape = nc.GradTape()
        w = tape.leaf(np.ones(3))
        v = tape.leaf(np.ones(2))
        loss = nc.reduce_sum(nc.square(w))
        np.testing.assert_array_equal(tape.gradient(loss, v), np.zeros(2))


def finite_difference(f, x0, h=1e-5):
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


class TestGradientChecks:
    """backward() vs central finite differences on random small graphs."""

    @pytest.mark.parametrize("trial", range(8))
    def test_mlp_scalar_losses(self, trial):
        rng = np.random.default_rng(100 + trial)
        widths = [int(rng.integers(1, 6)) for _ in range(3)]
        n = int(rng.integers(1, 6))
        x = rng.standard_normal((n, widths[0]))
        theta0 = rng.standard_normal(nc.mlp_param_count(widths))

        def f(theta):
            out = nc.mlp_forward(theta, x, widths)
            return float(np.sum(np.log1p(np.square(out))))

        tape = nc.GradTape()
        w = tape.leaf(theta0)
        out = nc.mlp_forward(w, x, widths)
        loss = nc.reduce_sum(nc.log(nc.add(nc.square(out), 1.0)))
        grad = tape.gradient(loss, w)
        fd = finite_difference(f, theta0)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)

    def test_fused_primitives(self):
        rng = np.random.default_rng(11)
        n, p = 4, 3
        x = rng.standard_normal((n, p))
        mask = (rng.random((n, p)) > 0.4).astype(float)
        mask[:, 0] = 1.0
        packed0 = rng.standard_normal(n * 2 * p)

        def f(flat):
            return float(
                np.sum(nc.masked_gaussian_head_rowsum(x, mask, flat.reshape(n, 2 * p), 1e-3))
            )

        tape = nc.GradTape()
        w = tape.leaf(packed0)
        loss = nc.reduce_sum(
            nc.masked_gaussian_head_rowsum(x, mask, nc.reshape(w, (n, 2 * p)), 1e-3)
        )
        np.testing.assert_allclose(
            tape.gradient(loss, w), finite_difference(f, packed0), rtol=1e-4, atol=1e-8
        )

        packed_t0 = rng.standard_normal(n * 3 * p)

        def ft(flat):
            return float(
                np.sum(
                    nc.masked_student_t_head_rowsum(
                        x, mask, flat.reshape(n, 3 * p), 1e-3, 3.0
                    )
                )
            )

        tape = nc.GradTape()
        w = tape.leaf(packed_t0)
        loss = nc.reduce_sum(
            nc.masked_student_t_head_rowsum(x, mask, nc.reshape(w, (n, 3 * p)), 1e-3, 3.0)
        )
        np.testing.assert_allclose(
            tape.gradient(loss, w), finite_difference(ft, packed_t0), rtol=1e-4, atol=1e-8
        )

    def test_gaussian_logpdf_all_arguments(self):
        rng = np.random.default_rng(12)
        shape = (3, 2)
        x0 = rng.standard_normal(shape).reshape(-1)
        mu0 = rng.standard_normal(shape).reshape(-1)
        s0 = rng.random(shape).reshape(-1) + 0.5

        for which in range(3):
            def f(flat):
                args = [x0, mu0, s0]
                args[which] = flat
                return float(
                    np.sum(nc.gaussian_logpdf(*[a.reshape(shape) for a in args]))
                )

            tape = nc.GradTape()
            leaf = tape.leaf([x0, mu0, s0][which])
            args = [x0.reshape(shape), mu0.reshape(shape), s0.reshape(shape)]
            args[which] = nc.reshape(leaf, shape)
            loss = nc.reduce_sum(nc.gaussian_logpdf(*args))
            np.testing.assert_allclose(
                tape.gradient(loss, leaf),
                finite_difference(f, [x0, mu0, s0][which]),
                rtol=1e-5, atol=1e-9,
            )

    def test_logsumexp_and_repeat(self):
        rng = np.random.default_rng(13)
        x0 = rng.standard_normal(8)

        def f(flat):
            rep = np.repeat(flat.reshape(4, 2), 3, axis=0)
            from scipy.special import logsumexp

            return float(np.sum(logsumexp(rep, axis=1)))

        tape = nc.GradTape()
        w = tape.leaf(x0)
        loss = nc.reduce_sum(
            nc.logsumexp(nc.repeat_rows(nc.reshape(w, (4, 2)), 3), axis=1)
        )
        np.testing.assert_allclose(
            tape.gradient(loss, w), finite_difference(f, x0), rtol=1e-5, atol=1e-9
        )


class TestDeterminism:
    def test_identical_inputs_identical_outputs(self):
        widths = [4, 5, 3]
        rng = np.random.default_rng(21)
        theta = rng.standard_normal(nc.mlp_param_count(widths))
        x = rng.standard_normal((6, 4))

        def run():
            tape = nc.GradTape()
            w = tape.leaf(theta.copy())
            out = nc.mlp_forward(w, x, widths)
            loss = nc.reduce_mean(nc.square(out))
            return out.value.copy(), tape.gradient(loss, w)

        out1, g1 = run()
        out2, g2 = run()
        assert np.array_equal(out1, out2)
        assert np.array_equal(g1, g2)


class TestAdam:
    def layout(self):
        return nc.ParamLayout((("w", (4,)),))

    def test_zero_gradient_keeps_params(self):
        layout = self.layout()
        params = nc.ParamVector(np.array([1.0, -2.0, 3.0, 0.5]), layout)
        state = nc.AdamState.fresh(4)
        out = nc.adam_step(state, params, nc.ParamVector(np.zeros(4), layout))
        np.testing.assert_array_equal(out.values, params.values)
        assert state.step == 1

    def test_first_step_closed_form(self):
        # with g = 1 everywhere the bias-corrected first step is lr/(1+eps)
        layout = self.layout()
        params = nc.ParamVector(np.zeros(4), layout)
        state = nc.AdamState.fresh(4, lr=1e-3)
        out = nc.adam_step(state, params, nc.ParamVector(np.ones(4), layout))
        expected = -1e-3 / (1.0 + 1e-8)
        np.testing.assert_allclose(out.values, np.full(4, expected), atol=1e-9)

    def test_matches_standalone_scalar_reference(self):
        # one-parameter Adam reimplemented inline as the oracle
        def scalar_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
            theta, m, v = 0.7, 0.0, 0.0
            for t, g in enumerate(grads, start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
            return theta

        grads = [0.3, -1.2, 0.05, 2.0]
        layout = nc.ParamLayout((("w", (1,)),))
        params = nc.ParamVector(np.array([0.7]), layout)
        state = nc.AdamState.fresh(1)
        for g in grads:
            params = nc.adam_step(state, params, nc.ParamVector(np.array([g]), layout))
        np.testing.assert_allclose(params.values[0], scalar_adam(grads), rtol=1e-14)

    def test_nonfinite_gradient_names_segment(self):
        layout = nc.ParamLayout((("enc.W0", (2,)), ("dec.W0", (2,))))
        params = nc.ParamVector(np.zeros(4), layout)
        state = nc.AdamState.fresh(4)
        bad = nc.ParamVector(np.array([0.0, 0.0, np.nan, 0.0]), layout)
        with pytest.raises(NumericError, match="dec.W0"):
            nc.adam_step(state, params, bad)

    def test_layout_mismatch_rejected(self):
        params = nc.ParamVector(np.zeros(4), self.layout())
        other = nc.ParamVector(np.zeros(4), nc.ParamLayout((("q", (4,)),)))
        with pytest.raises(DimensionError):
            nc.adam_step(nc.AdamState.fresh(4), params, other)
