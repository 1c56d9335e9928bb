import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noisymm import tensor as T
from noisymm.tensor import Adam, ShapeError, Tape, Tensor, finite_diff_check


class TestForward:
    def test_matmul_shape(self):
        out = T.matmul(np.ones((2, 3)), np.ones((3, 1)))
        assert out.shape == (2, 1)
        np.testing.assert_array_equal(out.data, [[3.0], [3.0]])

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError, match="inner dimensions"):
            T.matmul(np.ones((2, 3)), np.ones((2, 1)))

    def test_add_broadcast_mismatch(self):
        with pytest.raises(ShapeError, match="broadcast"):
            T.add(np.ones((2, 3)), np.ones((2,)))

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(np.zeros(3)).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_softmax_log_inputs(self):
        # exp(ln k) = k, normaliser 1 + 2 + 3 = 6
        out = T.softmax(np.log([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(4, 5)) * 10
        np.testing.assert_allclose(T.log_softmax(x, axis=1).data, np.log(T.softmax(x, axis=1).data),
                                   atol=1e-12)

    def test_l2_normalize_zero_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            T.l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]), axis=1)

    def test_l2_normalize_floor(self):
        out = T.l2_normalize(np.array([[3.0, 4.0], [0.0, 0.0]]), axis=1, eps=1e-12)
        np.testing.assert_allclose(out.data, [[0.6, 0.8], [0.0, 0.0]])

    def test_deterministic(self, rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        a = T.softmax(T.relu(T.matmul(x, w)), axis=1).data
        b = T.softmax(T.relu(T.matmul(x, w)), axis=1).data
        assert a.tobytes() == b.tobytes()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 7)),
              elements=st.floats(-300, 300, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(x, axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestBackward:
    def test_linear_map(self, rng):
        x = rng.normal(size=(3, 1))
        W = Tensor(rng.normal(size=(2, 3)))
        with Tape() as tape:
            loss = T.sum(T.matmul(W, x))
        (g,) = tape.gradient(loss, [W])
        np.testing.assert_allclose(g, np.broadcast_to(x.T, (2, 3)))

    def test_quadratic(self, rng):
        z = Tensor(rng.normal(size=5))
        with Tape() as tape:
            loss = T.sum(T.square(z))
        np.testing.assert_allclose(tape.gradient(loss, [z])[0], 2 * z.data)

    def test_non_scalar_rejected(self):
        z = Tensor(np.ones(3))
        with Tape() as tape:
            y = T.square(z)
        with pytest.raises(ShapeError, match="scalar"):
            tape.gradient(y, [z])

    def test_unused_parameter_gets_zero_gradient(self):
        a, b = Tensor(np.ones(2)), Tensor(np.ones((2, 2)))
        with Tape() as tape:
            loss = T.sum(a)
        ga, gb = tape.gradient(loss, [a, b])
        assert gb.shape == (2, 2) and not gb.any()
        np.testing.assert_array_equal(ga, [1.0, 1.0])

    def test_ops_outside_tape_are_not_recorded(self):
        z = Tensor(np.ones(2))
        T.square(z)
        with Tape() as tape:
            pass
        assert tape.records == []

    @pytest.mark.parametrize("build", [
        lambda p: T.sum(T.softmax(T.matmul(p["x"], p["w"]), axis=1) * np.arange(3.0)),
        lambda p: T.mean(T.log_softmax(T.matmul(p["x"], p["w"]), axis=0)),
        lambda p: T.sum(T.l2_normalize(T.add(p["x"], 1.0), axis=1) * np.arange(4.0)),
        lambda p: T.sum(T.exp(T.scale(p["x"], 0.3))),
        lambda p: T.sum(T.log(T.add(T.square(p["x"]), 1.0))),
        lambda p: T.sum(T.concat([p["x"], T.transpose(p["w"])], axis=0) * 1.5),
        lambda p: T.sum(T.reshape(p["w"], (12,)) * np.arange(12.0)),
        lambda p: T.sum(T.mul(T.mean(p["x"], axis=1, keepdims=True), p["x"])),
    ], ids=["softmax", "log_softmax", "l2norm", "exp", "log", "concat", "reshape", "mean-mul"])
    def test_elementary_ops_match_finite_differences(self, rng, build):
        params = {"x": Tensor(rng.normal(size=(3, 4))), "w": Tensor(rng.normal(size=(4, 3)))}
        res = finite_diff_check(lambda: build(params), params, step=1e-5, tolerance=1e-6)
        assert res.passed, res


class TestFiniteDiff:
    def test_quadratic_passes(self, rng):
        params = {"z": Tensor(rng.normal(size=6))}
        res = finite_diff_check(lambda: T.sum(T.square(params["z"])), params, tolerance=1e-6)
        assert res.passed and res.max_rel_error < 1e-6

    def test_corrupted_gradient_fails(self, rng):
        params = {"z": Tensor(rng.normal(size=6))}
        bad = {"z": 2 * params["z"].data + 0.01}
        res = finite_diff_check(lambda: T.sum(T.square(params["z"])), params, analytic=bad)
        assert not res.passed
        assert res.where[0] == "z"

    def test_non_finite_probe_fails_with_location(self):
        params = {"z": Tensor(np.array([1e-6, 1.0]))}
        res = finite_diff_check(lambda: T.sum(T.log(params["z"])) if params["z"].data[0] > 0
                                else Tensor(np.nan), params, step=1e-5)
        assert not res.passed and res.where == ("z", (0,))


class TestAdam:
    def test_zero_gradient_fixed_point(self, rng):
        p = {"w": Tensor(rng.normal(size=(3, 2)))}
        before = p["w"].data.copy()
        opt = Adam(p)
        for _ in range(5):
            opt.step({"w": np.zeros((3, 2))})
        np.testing.assert_array_equal(p["w"].data, before)
        assert opt.t == 5

    def test_first_step_magnitude_is_lr(self):
        # step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
        p = {"w": Tensor(np.array([0.0]))}
        opt = Adam(p, lr=1e-3)
        opt.step({"w": np.array([1.0])})
        assert p["w"].data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_defaults(self):
        opt = Adam({"w": Tensor(np.zeros(1))})
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (5e-5, 0.9, 0.999, 1e-8)

    def test_nan_gradient_names_parameter(self):
        opt = Adam({"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(2))})
        with pytest.raises(T.NonFiniteGradientError, match="'b'"):
            opt.step({"a": np.zeros(2), "b": np.array([0.0, np.nan])})
        assert opt.t == 0

    def test_missing_gradient_rejected(self):
        opt = Adam({"a": Tensor(np.zeros(2))})
        with pytest.raises(KeyError):
            opt.step({})

    def test_moments_share_parameter_shapes(self, rng):
        p = {"a": Tensor(rng.normal(size=(2, 3))), "b": Tensor(rng.normal(size=4))}
        opt = Adam(p)
        opt.step({"a": np.ones((2, 3)), "b": np.ones(4)})
        assert all(opt.m[k].shape == p[k].shape == opt.v[k].shape for k in p)

    def test_minimises_quadratic(self):
        p = {"w": Tensor(np.array([3.0, -2.0]))}
        opt = Adam(p, lr=0.1)
        for _ in range(300):
            opt.step({"w": 2 * p["w"].data})
        assert np.abs(p["w"].data).max() < 1e-2
