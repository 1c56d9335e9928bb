"""Per-sample inner loops, compiled with numba when available.

Every kernel exists twice: an ``@njit`` loop version and a vectorised numpy
version with identical results.  Set ``NOISYMM_DISABLE_NUMBA=1`` before
import to force the numpy path (numba is also skipped if it fails to import).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

DISABLE_FLAG = "NOISYMM_DISABLE_NUMBA"
USE_NUMBA = nb is not None and os.environ.get(DISABLE_FLAG, "0").lower() not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _neighbors_numpy(dist, k):
    """Indices of the k smallest entries per row, self excluded, ties by index."""
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    # a stable sort keeps equal distances in column-index order
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(dist, order, axis=1)


def _vote_numpy(nbr_idx, nbr_dist, labels, n_classes):
    n, k = nbr_idx.shape
    ballots = labels[nbr_idx]
    counts = np.zeros((n, n_classes), dtype=np.int64)
    dsum = np.zeros((n, n_classes), dtype=np.float64)
    rows = np.repeat(np.arange(n), k)
    np.add.at(counts, (rows, ballots.ravel()), 1)
    np.add.at(dsum, (rows, ballots.ravel()), nbr_dist.ravel())
    best = counts.max(axis=1, keepdims=True)
    tied = counts == best
    # lowest total distance among tied classes, then lowest class index (argmin picks first)
    cand = np.where(tied, dsum, np.inf)
    winner = np.argmin(cand, axis=1).astype(np.int64)
    return winner, best[:, 0] / k


def _similar_mean_numpy(gate, probe, eps, cap):
    n = gate.shape[0]
    out = np.empty(n, dtype=np.float64)
    sizes = np.zeros(n, dtype=np.int64)
    cols = np.arange(n)
    for i in range(n):
        g = gate[i]
        ok = (g > eps) & (cols != i)
        cand = cols[ok]
        if cand.size == 0:
            out[i] = np.nan
            continue
        if cand.size > cap:
            order = np.lexsort((cand, -g[cand]))[:cap]
            cand = cand[order]
        sizes[i] = cand.size
        out[i] = probe[i, cand].sum() / cand.size
    return out, sizes


def _sinkhorn_numpy(scores, iterations, reg, tol, max_iterations):
    b, k = scores.shape
    q = np.exp((scores - scores.max()) / reg)
    target = b / k
    done = 0
    while True:
        q *= target / q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
        done += 1
        if done >= iterations and (
                tol <= 0 or done >= max_iterations
                or np.abs(q.sum(axis=0) - target).max() <= tol):
            return q, done


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if nb is not None:

    @nb.njit(cache=True, error_model="numpy")
    def _neighbors_nb(dist, k):
        # bounded insertion sort per row: O(n k) instead of a full sort
        n = dist.shape[0]
        idx = np.empty((n, k), dtype=np.int64)
        dd = np.empty((n, k), dtype=np.float64)
        for i in range(n):
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                d = dist[i, j]
                if filled == k and not d < dd[i, k - 1]:
                    continue  # columns arrive in index order, so equal distances stay behind
                pos = filled if filled < k else k - 1
                while pos > 0 and d < dd[i, pos - 1]:
                    dd[i, pos] = dd[i, pos - 1]
                    idx[i, pos] = idx[i, pos - 1]
                    pos -= 1
                dd[i, pos] = d
                idx[i, pos] = j
                if filled < k:
                    filled += 1
        return idx, dd

    @nb.njit(cache=True, error_model="numpy")
    def _vote_nb(nbr_idx, nbr_dist, labels, n_classes):
        n, k = nbr_idx.shape
        winner = np.empty(n, dtype=np.int64)
        agree = np.empty(n, dtype=np.float64)
        counts = np.zeros(n_classes, dtype=np.int64)
        dsum = np.zeros(n_classes, dtype=np.float64)
        for i in range(n):
            counts[:] = 0
            dsum[:] = 0.0
            for t in range(k):
                c = labels[nbr_idx[i, t]]
                counts[c] += 1
                dsum[c] += nbr_dist[i, t]
            best_c = -1
            for c in range(n_classes):
                if counts[c] == 0:
                    continue
                if best_c < 0 or counts[c] > counts[best_c] or (
                        counts[c] == counts[best_c] and dsum[c] < dsum[best_c]):
                    best_c = c
            winner[i] = best_c
            agree[i] = counts[best_c] / k
        return winner, agree

    @nb.njit(cache=True, error_model="numpy")
    def _similar_mean_nb(gate, probe, eps, cap):
        n = gate.shape[0]
        out = np.empty(n, dtype=np.float64)
        sizes = np.zeros(n, dtype=np.int64)
        buf_idx = np.empty(n, dtype=np.int64)
        buf_val = np.empty(n, dtype=np.float64)
        for i in range(n):
            m = 0
            for j in range(n):
                if j != i and gate[i, j] > eps:
                    buf_idx[m] = j
                    buf_val[m] = -gate[i, j]
                    m += 1
            if m == 0:
                out[i] = np.nan
                continue
            take = m
            if m > cap:
                order = np.argsort(buf_val[:m], kind="mergesort")
                take = cap
                s = 0.0
                for t in range(take):
                    s += probe[i, buf_idx[order[t]]]
            else:
                s = 0.0
                for t in range(take):
                    s += probe[i, buf_idx[t]]
            sizes[i] = take
            out[i] = s / take
        return out, sizes

    @nb.njit(cache=True, error_model="numpy")
    def _sinkhorn_nb(scores, iterations, reg, tol, max_iterations):
        b, k = scores.shape
        q = np.exp((scores - scores.max()) / reg)
        target = b / k
        done = 0
        while True:
            for c in range(k):
                s = 0.0
                for i in range(b):
                    s += q[i, c]
                f = target / s
                for i in range(b):
                    q[i, c] *= f
            for i in range(b):
                s = 0.0
                for c in range(k):
                    s += q[i, c]
                for c in range(k):
                    q[i, c] /= s
            done += 1
            if done >= iterations:
                if tol <= 0 or done >= max_iterations:
                    return q, done
                worst = 0.0
                for c in range(k):
                    s = 0.0
                    for i in range(b):
                        s += q[i, c]
                    worst = max(worst, abs(s - target))
                if worst <= tol:
                    return q, done

def nearest_neighbors(dist: np.ndarray, k: int, backend: str | None = None):
    """k nearest rows of a full distance matrix (self excluded, ties by lower index)."""
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    if _pick(backend) == "numba":
        return _neighbors_nb(dist, k)
    return _neighbors_numpy(dist, k)


def majority_vote(nbr_idx, nbr_dist, labels, n_classes: int, backend: str | None = None):
    """Mode of neighbour labels, ties by smaller summed distance then lower class."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if _pick(backend) == "numba":
        return _vote_nb(nbr_idx, np.ascontiguousarray(nbr_dist), labels, n_classes)
    return _vote_numpy(nbr_idx, nbr_dist, labels, n_classes)


def similar_set_mean(gate: np.ndarray, probe: np.ndarray, eps: float, cap: int,
                     backend: str | None = None):
    """For each row i: mean of ``probe[i, J]`` where J are columns with ``gate[i, j] > eps``.

    J excludes i and keeps at most ``cap`` columns with the largest gate value
    (ties by lower index).  Rows with an empty J get NaN.  Returns the means
    and the set sizes.
    """
    gate = np.ascontiguousarray(gate, dtype=np.float64)
    probe = np.ascontiguousarray(probe, dtype=np.float64)
    if _pick(backend) == "numba":
        return _similar_mean_nb(gate, probe, float(eps), int(cap))
    return _similar_mean_numpy(gate, probe, float(eps), int(cap))


def sinkhorn(scores: np.ndarray, iterations: int, reg: float, tol: float = 0.0,
             max_iterations: int = 10000, backend: str | None = None):
    """Scale ``exp(scores / reg)`` to column sums B/K and row sums 1.

    Each round rescales columns then rows, so rows sum to one exactly.  With
    ``tol > 0`` rounds continue past ``iterations`` until every column is
    within ``tol`` of B/K (or ``max_iterations`` is hit).  Returns the matrix
    and the number of rounds run.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    args = (scores, int(iterations), float(reg), float(tol), int(max_iterations))
    if _pick(backend) == "numba":
        return _sinkhorn_nb(*args)
    return _sinkhorn_numpy(*args)

def _pick(backend: str | None) -> str:
    if backend is None:
        return BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "numba" and nb is None:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend
