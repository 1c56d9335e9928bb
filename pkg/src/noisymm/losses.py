"""Objectives of the two training phases.

Differentiable losses take and return :class:`~noisymm.tensor.Tensor`
objects.  Sinkhorn targets and correspondence weights are plain numpy arrays
and therefore constants for differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12   # all-zero ReLU features normalise to zero instead of failing


class PartialBatch(Exception):
    """Batch is smaller than the configured width; the category loss is skipped."""


# ---------------------------------------------------------------------------
# similarity and correspondence estimation
# ---------------------------------------------------------------------------

def scaled_cosine(z_i, z_j, tau1: float = 1.0) -> float:
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    ni, nj = np.linalg.norm(z_i), np.linalg.norm(z_j)
    if ni == 0 or nj == 0:
        raise ValueError("scaled_cosine: zero vector")
    return float(z_i @ z_j / (ni * nj) / tau1)


def cosine_matrix(a: np.ndarray, b: np.ndarray | None = None, tau1: float = 1.0) -> np.ndarray:
    """All-pairs scaled cosine similarity between the rows of ``a`` and ``b``."""
    an = _unit_rows(a)
    bn = an if b is None else _unit_rows(b)
    return an @ bn.T / tau1


def _unit_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalise; all-zero rows stay zero (similarity 0 to everything)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, NORM_FLOOR)


def similar_sets(features_v: np.ndarray, features_a: np.ndarray, i: int,
                 eps_v: float, eps_a: float, cap: int, tau1: float = 1.0
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Similar-sample index sets of sample ``i``.

    The visual set is gated by audio similarity (``S(a_j, a_i) > eps_a``)
    and the audio set by visual similarity.  Each set excludes ``i`` and is
    cut to the ``cap`` most similar entries, ordered by decreasing gate
    similarity with ties broken by lower index.
    """
    def gated(feats, eps):
        sims = cosine_matrix(feats[i:i + 1], feats, tau1)[0]
        idx = np.flatnonzero(sims > eps)
        idx = idx[idx != i]
        order = np.lexsort((idx, -sims[idx]))
        return idx[order][:cap]

    return gated(features_a, eps_a), gated(features_v, eps_v)


def weights_from_sets(features_v: np.ndarray, features_a: np.ndarray,
                      sets_v: list[np.ndarray], sets_a: list[np.ndarray], tau1: float = 1.0
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Correspondence weights from explicit similar sets (one pair of sets per sample)."""
    n = len(features_v)
    w_v = np.ones(n)
    w_a = np.ones(n)
    for i in range(n):
        if len(sets_v[i]):
            w_v[i] = np.mean([scaled_cosine(features_v[j], features_v[i], tau1) for j in sets_v[i]])
        if len(sets_a[i]):
            w_a[i] = np.mean([scaled_cosine(features_a[j], features_a[i], tau1) for j in sets_a[i]])
    return np.clip(w_v, 0.0, 1.0), np.clip(w_a, 0.0, 1.0)


@dataclass
class CorrespondenceWeights:
    omega_v: np.ndarray
    omega_a: np.ndarray
    size_v: np.ndarray = field(default=None, repr=False)
    size_a: np.ndarray = field(default=None, repr=False)


def correspondence_weights(features_v: np.ndarray, features_a: np.ndarray,
                           eps_v: float, eps_a: float, cap: int, tau1: float = 1.0,
                           backend: str | None = None) -> CorrespondenceWeights:
    """Per-sample visual/audio weights over a whole feature pool.

    ``omega_v[i]`` averages the visual similarity between sample i and the
    members of its audio-gated similar set; ``omega_a`` swaps the roles.
    Means are clamped to [0, 1]; an empty set yields 1.
    """
    sim_v = cosine_matrix(features_v, tau1=tau1)
    sim_a = cosine_matrix(features_a, tau1=tau1)
    w_v, size_v = _kernels.similar_set_mean(sim_a, sim_v, eps_a, cap, backend)
    w_a, size_a = _kernels.similar_set_mean(sim_v, sim_a, eps_v, cap, backend)
    w_v = np.where(size_v == 0, 1.0, np.clip(w_v, 0.0, 1.0))
    w_a = np.where(size_a == 0, 1.0, np.clip(w_a, 0.0, 1.0))
    return CorrespondenceWeights(w_v, w_a, size_v, size_a)


# ---------------------------------------------------------------------------
# instance level
# ---------------------------------------------------------------------------

def prototype_scores(features, prototypes) -> Tensor:
    """Dot products of L2-normalised features with the prototype rows (B x K)."""
    return T.matmul(T.l2_normalize(features, axis=1, eps=NORM_FLOOR), T.transpose(prototypes))


def cluster_probs(features, prototypes, tau2: float = 0.1) -> Tensor:
    """Row-wise softmax over prototypes of the normalised feature scores divided by ``tau2``."""
    return T.softmax(T.scale(prototype_scores(features, prototypes), 1.0 / tau2), axis=1)


def sinkhorn_assign(scores: np.ndarray, iterations: int = 3, reg: float = 0.05,
                    mode: str = "soft", tol: float = 0.0, backend: str | None = None
                    ) -> np.ndarray:
    """Equal-partition cluster targets for one modality (B x K, rows sum to 1).

    ``hard`` returns the one-hot argmax of the soft plan.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be B x K, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("sinkhorn_assign: non-finite scores")
    if mode not in ("soft", "hard"):
        raise ValueError(f"unknown assignment mode {mode!r}")
    with np.errstate(all="ignore"):
        q, _ = _kernels.sinkhorn(scores, iterations, reg, tol=tol, backend=backend)
    if not np.all(np.isfinite(q)):
        raise FloatingPointError(
            f"sinkhorn_assign: non-finite plan (reg={reg} too small for score range "
            f"{scores.min():.3g}..{scores.max():.3g}?)")
    if mode == "hard":
        hard = np.zeros_like(q)
        hard[np.arange(len(q)), q.argmax(axis=1)] = 1.0
        return hard
    return q


def soft_cross_entropy(targets: np.ndarray, probs) -> Tensor:
    """Per-row ``-sum_k q_k log p_k`` with p floored at 1e-12 (vector of length B)."""
    logp = T.log(T.maximum(probs, LOG_FLOOR))
    return T.neg(T.sum(T.mul(Tensor(targets), logp), axis=1))


def instance_loss(probs_v, probs_a, q_v: np.ndarray, q_a: np.ndarray,
                  omega_v: np.ndarray, omega_a: np.ndarray) -> Tensor:
    """Weighted swapped prediction: audio targets supervise visual probabilities and vice versa."""
    probs_v, probs_a = T.as_tensor(probs_v), T.as_tensor(probs_a)
    if not (probs_v.shape == probs_a.shape == np.shape(q_v) == np.shape(q_a)):
        raise ShapeError(f"instance_loss shape mismatch: probs {probs_v.shape}/{probs_a.shape}, "
                         f"targets {np.shape(q_v)}/{np.shape(q_a)}")
    b = probs_v.shape[0]
    w_v = Tensor(np.asarray(omega_v, dtype=np.float64).reshape(b))
    w_a = Tensor(np.asarray(omega_a, dtype=np.float64).reshape(b))
    term_v = T.mul(w_v, soft_cross_entropy(q_a, probs_v))
    term_a = T.mul(w_a, soft_cross_entropy(q_v, probs_a))
    return T.mean(T.add(term_v, term_a))


# ---------------------------------------------------------------------------
# category level
# ---------------------------------------------------------------------------

def category_representations(features_v, features_a, prototypes, tau2: float = 0.1,
                             batch_size: int | None = None) -> tuple[Tensor, Tensor]:
    """K x B category representations per modality.

    Softmax responses over the K category prototypes per sample, transposed so
    row k holds class k's response to each of the B samples.  Raises
    :class:`PartialBatch` when the batch is not ``batch_size`` wide.
    """
    b = T.as_tensor(features_v).shape[0]
    if batch_size is not None and b != batch_size:
        raise PartialBatch(f"batch of {b} samples, category loss needs {batch_size}")
    p_v = T.transpose(cluster_probs(features_v, prototypes, tau2))
    p_a = T.transpose(cluster_probs(features_a, prototypes, tau2))
    return p_v, p_a


def _info_nce(anchor, bank1, bank2, positive: str, tau1: float) -> Tensor:
    """-(1/K) sum_i log softmax_i over [S(anchor_i, bank1_j), S(anchor_i, bank2_j)] at the positive."""
    a = T.l2_normalize(anchor, axis=1, eps=NORM_FLOOR)
    s1 = T.scale(T.matmul(a, T.transpose(T.l2_normalize(bank1, axis=1, eps=NORM_FLOOR))), 1.0 / tau1)
    s2 = T.scale(T.matmul(a, T.transpose(T.l2_normalize(bank2, axis=1, eps=NORM_FLOOR))), 1.0 / tau1)
    k = s1.shape[0]
    mask = np.zeros((k, 2 * k))
    col = np.arange(k) if positive == "bank1" else np.arange(k) + k
    mask[np.arange(k), col] = 1.0
    logp = T.log_softmax(T.concat([s1, s2], axis=1), axis=1)
    return T.neg(T.mean(T.sum(T.mul(Tensor(mask), logp), axis=1)))


@dataclass
class CategoryTerms:
    l_rv: Tensor
    l_ra: Tensor
    l_cv: Tensor
    l_ca: Tensor
    total: Tensor


def category_loss(p_v, p_a, rec_v, rec_a, tau1: float = 1.0) -> CategoryTerms:
    """Intra-modal (original vs reconstruction) and inter-modal (reconstruction pair) terms.

    Negatives for every anchor are all K reconstructions of both modalities.
    The total is the plain mean of the four terms.
    """
    p_v, p_a, rec_v, rec_a = (T.as_tensor(x) for x in (p_v, p_a, rec_v, rec_a))
    if not (p_v.shape == p_a.shape == rec_v.shape == rec_a.shape):
        raise ShapeError(f"category_loss shape mismatch: {p_v.shape}, {p_a.shape}, "
                         f"{rec_v.shape}, {rec_a.shape}")
    l_rv = _info_nce(p_v, rec_v, rec_a, "bank1", tau1)
    l_ra = _info_nce(p_a, rec_a, rec_v, "bank1", tau1)
    l_cv = _info_nce(rec_v, rec_v, rec_a, "bank2", tau1)
    l_ca = _info_nce(rec_a, rec_a, rec_v, "bank2", tau1)
    total = T.scale(T.add(T.add(l_cv, l_ca), T.add(l_rv, l_ra)), 0.25)
    return CategoryTerms(l_rv, l_ra, l_cv, l_ca, total)


def contrastive_loss(l_ins, l_cat) -> Tensor:
    return T.add(l_ins, l_cat)


# ---------------------------------------------------------------------------
# supervised
# ---------------------------------------------------------------------------

def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels outside [0, {k})")
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def per_sample_cross_entropy(logits, labels) -> Tensor:
    logits = T.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"logits {logits.shape} do not match {len(labels)} labels")
    onehot = _one_hot(labels, logits.shape[1])
    return T.neg(T.sum(T.mul(Tensor(onehot), T.log_softmax(logits, axis=1)), axis=1))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    return T.mean(per_sample_cross_entropy(logits, labels))


def hybrid_loss(logits, observed, corrected, gamma: float) -> tuple[Tensor, Tensor, Tensor]:
    """``(1 - gamma) * CE(observed) + gamma * CE(corrected)``.

    Returns the combined loss and the two cross-entropy terms.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    ce_obs = cross_entropy(logits, observed)
    ce_cor = cross_entropy(logits, corrected)
    return T.add(T.scale(ce_obs, 1.0 - gamma), T.scale(ce_cor, gamma)), ce_obs, ce_cor


@dataclass
class LossBreakdown:
    l_ins: float = float("nan")
    l_cat: float = float("nan")
    l_rv: float = float("nan")
    l_ra: float = float("nan")
    l_cv: float = float("nan")
    l_ca: float = float("nan")
    l_c: float = float("nan")
    l_s: float = float("nan")
    ce_observed: float = float("nan")
    ce_corrected: float = float("nan")
