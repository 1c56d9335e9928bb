"""KNN label rectification on fused features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass
class CorrectedLabels:
    labels: np.ndarray
    agreement: np.ndarray


def fuse(features_v: np.ndarray, features_a: np.ndarray) -> np.ndarray:
    """Concatenate per-modality L2-normalised features (rows with zero norm stay zero)."""
    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x, dtype=np.float64), where=n > 0)
    return np.concatenate([unit(np.asarray(features_v, dtype=np.float64)),
                           unit(np.asarray(features_a, dtype=np.float64))], axis=1)


def cosine_distance(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    u = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return 1.0 - u @ u.T


def knn_correct(features_fused: np.ndarray, observed_labels: np.ndarray, k: int = 10,
                n_classes: int | None = None, backend: str | None = None) -> CorrectedLabels:
    """Majority vote of the observed labels of each sample's k nearest neighbours.

    Neighbours are found by cosine distance with the sample itself excluded;
    equal distances are ordered by lower index.  Vote ties go to the class
    with the smaller summed neighbour distance, then to the lower class index.
    """
    x = np.asarray(features_fused, dtype=np.float64)
    labels = np.asarray(observed_labels, dtype=np.int64)
    n = len(x)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n <= k:
        raise ValueError(f"need more than k={k} samples, got {n}")
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} samples")
    if labels.min() < 0:
        raise ValueError("labels must be non-negative")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    dist = cosine_distance(x)
    idx, dd = _kernels.nearest_neighbors(dist, k, backend)
    winner, agree = _kernels.majority_vote(idx, dd, labels, n_classes, backend)
    return CorrectedLabels(winner, agree)
