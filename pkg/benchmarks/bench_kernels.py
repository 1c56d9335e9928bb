"""Compare the numba and numpy implementations of the per-sample kernels.

Usage::

    python benchmarks/bench_kernels.py [--n 2000] [--repeat 5]

The first numba call of each kernel includes compilation (or a cache load)
and is excluded from the timings.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from noisymm import _kernels as K
from noisymm.correction import cosine_distance
from noisymm.losses import cosine_matrix


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=2000, help="pool size for KNN / similar sets")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if K.nb is None:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    feats = rng.normal(size=(args.n, 32))
    dist = cosine_distance(feats)
    sim_a = cosine_matrix(feats + 0.5 * rng.normal(size=feats.shape))
    sim_v = cosine_matrix(feats)
    labels = rng.integers(0, 10, size=args.n)
    idx, dd = K.nearest_neighbors(dist, 10, "numpy")
    scores = rng.uniform(-1, 1, size=(64, 10))

    cases = {
        "nearest_neighbors": lambda b: K.nearest_neighbors(dist, 10, b),
        "majority_vote": lambda b: K.majority_vote(idx, dd, labels, 10, b),
        "similar_set_mean": lambda b: K.similar_set_mean(sim_a, sim_v, 0.5, 16, b),
        "sinkhorn (B=64, 3 rounds)": lambda b: K.sinkhorn(scores, 3, 0.05, backend=b),
        "sinkhorn (tol 1e-6)": lambda b: K.sinkhorn(scores, 3, 0.05, tol=1e-6, backend=b),
    }
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        fn("numba")  # compile / load cache
        t_np = _best(lambda: fn("numpy"), args.repeat)
        t_nb = _best(lambda: fn("numba"), args.repeat)
        print(f"{name:28s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
