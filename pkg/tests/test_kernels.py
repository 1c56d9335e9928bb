import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisymm import _kernels as K

BACKENDS = ["numpy", "numba"]


def _brute_neighbors(dist, k):
    n = len(dist)
    idx = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cands = sorted((dist[i, j], j) for j in range(n) if j != i)
        idx[i] = [j for _, j in cands[:k]]
    return idx


class TestNearestNeighbors:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_matches_sorted_list(self, rng, backend):
        x = rng.normal(size=(25, 3))
        dist = np.linalg.norm(x[:, None] - x[None], axis=2)
        idx, dd = K.nearest_neighbors(dist, 4, backend)
        np.testing.assert_array_equal(idx, _brute_neighbors(dist, 4))
        np.testing.assert_array_equal(dd, np.take_along_axis(dist, idx, axis=1))

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_ties_go_to_lower_index(self, backend):
        dist = np.ones((5, 5))
        idx, _ = K.nearest_neighbors(dist, 2, backend)
        np.testing.assert_array_equal(idx, [[1, 2], [0, 2], [0, 1], [0, 1], [0, 1]])


class TestMajorityVote:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_count_then_distance_then_index(self, backend):
        labels = np.array([0, 1, 1, 2, 2, 0])
        nbr = np.array([[1, 2, 0],      # two votes for 1
                        [3, 1, 0],      # 2, 1, 0 once each; 0 is closest
                        [3, 4, 5]])     # 2 twice
        dist = np.array([[0.1, 0.2, 0.3],
                         [0.5, 0.4, 0.1],
                         [0.1, 0.1, 0.0]])
        winner, agree = K.majority_vote(nbr, dist, labels, 3, backend)
        np.testing.assert_array_equal(winner, [1, 0, 2])
        np.testing.assert_allclose(agree, [2 / 3, 1 / 3, 2 / 3])

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_equal_distance_tie_goes_to_lower_class(self, backend):
        winner, _ = K.majority_vote(np.array([[0, 1]]), np.array([[0.2, 0.2]]),
                                    np.array([3, 1]), 4, backend)
        assert winner[0] == 1


class TestSimilarSetMean:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_threshold_cap_and_empty(self, backend):
        gate = np.array([[1.0, 0.9, 0.8, 0.95],
                         [0.1, 1.0, 0.2, 0.3],
                         [0.7, 0.7, 1.0, 0.7],
                         [0.0, 0.0, 0.0, 1.0]])
        probe = np.arange(16.0).reshape(4, 4)
        mean, size = K.similar_set_mean(gate, probe, eps=0.5, cap=2, backend=backend)
        # row 0: {3, 1} (largest gates); row 2: ties 0,1,3 -> {0, 1}
        np.testing.assert_array_equal(size, [2, 0, 2, 0])
        assert mean[0] == pytest.approx((3 + 1) / 2)
        assert mean[2] == pytest.approx((8 + 9) / 2)
        assert np.isnan(mean[1]) and np.isnan(mean[3])


class TestSinkhorn:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_rows_exact_columns_with_tol(self, rng, backend):
        s = rng.uniform(-1, 1, size=(12, 4))
        q, rounds = K.sinkhorn(s, 3, 0.05, tol=1e-8, backend=backend)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(q.sum(axis=0), 3.0, atol=1e-8)
        assert rounds >= 3

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_fixed_rounds(self, rng, backend):
        _, rounds = K.sinkhorn(rng.normal(size=(6, 3)), 3, 0.5, backend=backend)
        assert rounds == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(12, 30), st.integers(1, 6))
def test_backends_agree(seed, n, k):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 4))
    dist = 1 - (x / np.linalg.norm(x, axis=1, keepdims=True)) @ (x / np.linalg.norm(x, axis=1, keepdims=True)).T
    labels = r.integers(0, 3, size=n)
    a = K.nearest_neighbors(dist, k, "numpy")
    b = K.nearest_neighbors(dist, k, "numba")
    np.testing.assert_array_equal(a[0], b[0])
    va = K.majority_vote(*a, labels, 3, "numpy")
    vb = K.majority_vote(*b, labels, 3, "numba")
    np.testing.assert_array_equal(va[0], vb[0])
    np.testing.assert_array_equal(va[1], vb[1])
    gate = 1 - dist
    ma = K.similar_set_mean(gate, gate.T.copy(), 0.2, k, "numpy")
    mb = K.similar_set_mean(gate, gate.T.copy(), 0.2, k, "numba")
    np.testing.assert_array_equal(ma[1], mb[1])
    np.testing.assert_allclose(ma[0], mb[0], rtol=1e-12, equal_nan=True)
    sa = K.sinkhorn(gate[:, :k], 3, 0.1, backend="numpy")
    sb = K.sinkhorn(gate[:, :k], 3, 0.1, backend="numba")
    np.testing.assert_allclose(sa[0], sb[0], rtol=1e-10)


def test_unknown_backend():
    with pytest.raises(ValueError, match="backend"):
        K.nearest_neighbors(np.zeros((3, 3)), 1, backend="cuda")


def test_env_flag_forces_numpy():
    env = {**os.environ, K.DISABLE_FLAG: "1"}
    out = subprocess.run([sys.executable, "-c", "from noisymm import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
