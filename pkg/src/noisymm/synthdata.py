"""Synthetic two-modality datasets with controlled label and correspondence noise."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .storage import read_arrays, write_arrays

__all__ = [
    "GeneratorConfig", "NoiseConfig", "MultimodalDataset", "Splits",
    "generate", "inject_label_noise", "inject_correspondence_noise", "apply_noise",
    "noise_audit", "save", "load", "NoiseError",
]

DATASET_KIND = "noisymm.dataset"


class NoiseError(ValueError):
    """Noise cannot be injected as requested."""


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 10
    per_class: int = 200
    per_class_test: int = 50
    d_v: int = 64
    d_a: int = 64
    latent_dim: int | None = None
    class_separation: float = 4.0
    modality_correlation: float = 0.0
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.per_class < 1:
            raise ValueError(f"per_class must be >= 1, got {self.per_class}")
        if self.per_class_test < 0:
            raise ValueError("per_class_test must be >= 0")
        if min(self.d_v, self.d_a) < 2:
            raise ValueError(f"modality dims must be >= 2, got d_v={self.d_v}, d_a={self.d_a}")
        if self.class_separation < 0 or not np.isfinite(self.class_separation):
            raise ValueError(f"class_separation must be finite and >= 0, got {self.class_separation}")
        if not 0.0 <= self.modality_correlation <= 1.0:
            raise ValueError("modality_correlation must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.latent_dim is not None and self.latent_dim < self.n_classes:
            raise ValueError("latent_dim must be >= n_classes so class means are equidistant")


@dataclass(frozen=True)
class NoiseConfig:
    label_mode: str = "none"          # "symmetric" | "asymmetric" | "none"
    label_rate: float = 0.0
    correspondence_rate: float = 0.0
    disjoint: bool = False            # keep mismatched-audio samples out of the flipped-label set
    seed: int = 0

    def validate(self) -> None:
        if self.label_mode not in ("symmetric", "asymmetric", "none"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        for name in ("label_rate", "correspondence_rate"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {r}")
        if self.label_mode == "none" and self.label_rate > 0:
            raise ValueError("label_rate > 0 needs label_mode symmetric or asymmetric")


@dataclass(eq=False)
class MultimodalDataset:
    """Column-oriented samples: row i of every array belongs to sample ``ids[i]``.

    ``donor_label`` is the true class of the sample whose audio was placed
    into row i (equal to ``true_label`` for untouched rows).
    """

    visual: np.ndarray
    audio: np.ndarray
    true_label: np.ndarray
    observed_label: np.ndarray
    correspondence_clean: np.ndarray
    ids: np.ndarray
    n_classes: int
    donor_label: np.ndarray | None = None
    label_noise: dict | None = None
    correspondence_noise: dict | None = None

    def __post_init__(self):
        n = len(self.true_label)
        if self.donor_label is None:
            self.donor_label = self.true_label.copy()
        for name in ("visual", "audio", "observed_label", "correspondence_clean", "ids", "donor_label"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.visual.ndim != 2 or self.audio.ndim != 2:
            raise ValueError("visual and audio must be 2-D (samples x dims)")

    def __len__(self) -> int:
        return len(self.true_label)

    @property
    def d_v(self) -> int:
        return self.visual.shape[1]

    @property
    def d_a(self) -> int:
        return self.audio.shape[1]

    @property
    def label_noisy(self) -> np.ndarray:
        return self.observed_label != self.true_label

    def replace(self, **changes) -> "MultimodalDataset":
        return dataclasses.replace(self, **changes)

    def subset(self, index) -> "MultimodalDataset":
        index = np.asarray(index)
        return self.replace(visual=self.visual[index], audio=self.audio[index],
                            true_label=self.true_label[index],
                            observed_label=self.observed_label[index],
                            correspondence_clean=self.correspondence_clean[index],
                            ids=self.ids[index], donor_label=self.donor_label[index])

    def equals(self, other: "MultimodalDataset") -> bool:
        arrays = ("visual", "audio", "true_label", "observed_label", "correspondence_clean",
                  "ids", "donor_label")
        return (self.n_classes == other.n_classes
                and self.label_noise == other.label_noise
                and self.correspondence_noise == other.correspondence_noise
                and all(getattr(self, a).shape == getattr(other, a).shape
                        and np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays))


@dataclass
class Splits:
    train: MultimodalDataset
    test: MultimodalDataset
    config: GeneratorConfig = field(default_factory=GeneratorConfig)


def _orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix with orthonormal rows (rows <= cols) or columns."""
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    return q.T if rows <= cols else q


def generate(config: GeneratorConfig) -> Splits:
    """Draw a train split and a clean test split from one class-structured model.

    Each class gets a latent mean; the means are mutually ``class_separation``
    apart.  A sample's modality latents are ``mean + sqrt(rho) * shared +
    sqrt(1 - rho) * private`` with unit-variance Gaussian draws, so the
    within-class std of each latent is 1 and ``rho`` is the shared fraction.
    Visual and audio vectors are fixed random isometric projections of their
    latents plus isotropic observation noise of ``noise_std``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.n_classes
    latent = config.latent_dim or k
    means = config.class_separation / np.sqrt(2.0) * _orthonormal(rng, k, latent)
    proj_v = _orthonormal(rng, latent, config.d_v)
    proj_a = _orthonormal(rng, latent, config.d_a)
    rho = config.modality_correlation

    def draw(per_class: int, id_start: int) -> MultimodalDataset:
        labels = np.repeat(np.arange(k), per_class)
        labels = labels[rng.permutation(len(labels))]
        n = len(labels)
        shared = rng.standard_normal((n, latent))
        lat_v = means[labels] + np.sqrt(rho) * shared + np.sqrt(1 - rho) * rng.standard_normal((n, latent))
        lat_a = means[labels] + np.sqrt(rho) * shared + np.sqrt(1 - rho) * rng.standard_normal((n, latent))
        vis = lat_v @ proj_v + config.noise_std * rng.standard_normal((n, config.d_v))
        aud = lat_a @ proj_a + config.noise_std * rng.standard_normal((n, config.d_a))
        return MultimodalDataset(
            visual=vis.reshape(n, config.d_v), audio=aud.reshape(n, config.d_a),
            true_label=labels.astype(np.int64), observed_label=labels.astype(np.int64),
            correspondence_clean=np.ones(n, dtype=bool),
            ids=np.arange(id_start, id_start + n, dtype=np.int64), n_classes=k)

    train = draw(config.per_class, 0)
    test = draw(config.per_class_test, len(train))
    return Splits(train=train, test=test, config=config)


def _count(rate: float, n: int) -> int:
    return int(np.floor(rate * n + 0.5))


def inject_label_noise(dataset: MultimodalDataset, mode: str, rate: float, seed: int,
                       exclude: np.ndarray | None = None) -> MultimodalDataset:
    """Flip exactly ``round(rate * N)`` observed labels.

    ``symmetric`` draws the new label uniformly from the other K-1 classes;
    ``asymmetric`` maps class k to (k + 1) mod K.  ``exclude`` is an optional
    boolean mask of rows that may not be selected.
    """
    if dataset.label_noise is not None:
        raise NoiseError("label noise was already injected into this dataset")
    if mode not in ("symmetric", "asymmetric", "none"):
        raise ValueError(f"unknown label noise mode {mode!r}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    if mode == "none" and rate > 0:
        raise ValueError("mode 'none' only accepts rate 0")
    n = len(dataset)
    pool = np.arange(n) if exclude is None else np.flatnonzero(~np.asarray(exclude, dtype=bool))
    count = _count(rate, n)
    if count > len(pool):
        raise NoiseError(f"cannot flip {count} labels from a pool of {len(pool)} eligible samples")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(pool, size=count, replace=False)) if count else np.empty(0, np.int64)
    observed = dataset.observed_label.copy()
    k = dataset.n_classes
    if mode == "symmetric":
        observed[chosen] = (dataset.true_label[chosen] + rng.integers(1, k, size=count)) % k
    elif mode == "asymmetric":
        observed[chosen] = (dataset.true_label[chosen] + 1) % k
    info = {"mode": mode, "rate": float(rate), "seed": int(seed), "count": int(count)}
    return dataset.replace(observed_label=observed, label_noise=info)


def inject_correspondence_noise(dataset: MultimodalDataset, rate: float, seed: int,
                                exclude: np.ndarray | None = None) -> MultimodalDataset:
    """Replace the audio of exactly ``round(rate * N)`` samples by audio of another class.

    Each selected row receives the (original) audio of a donor drawn
    uniformly among samples whose true class differs.  Visual vectors,
    labels and the sample count are untouched.
    """
    if dataset.correspondence_noise is not None:
        raise NoiseError("correspondence noise was already injected into this dataset")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    n = len(dataset)
    count = _count(rate, n)
    true = dataset.true_label
    if count and len(np.unique(true)) < 2:
        raise NoiseError("correspondence noise needs at least two classes present")
    pool = np.arange(n) if exclude is None else np.flatnonzero(~np.asarray(exclude, dtype=bool))
    if count > len(pool):
        raise NoiseError(f"cannot mismatch {count} samples from a pool of {len(pool)} eligible samples")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(pool, size=count, replace=False)) if count else np.empty(0, np.int64)
    audio = dataset.audio.copy()
    donor_label = dataset.donor_label.copy()
    clean = dataset.correspondence_clean.copy()
    donors = np.empty(count, dtype=np.int64)
    for t, i in enumerate(chosen):
        candidates = np.flatnonzero(true != true[i])
        donors[t] = candidates[rng.integers(len(candidates))]
    audio[chosen] = dataset.audio[donors]
    donor_label[chosen] = true[donors]
    clean[chosen] = False
    info = {"rate": float(rate), "seed": int(seed), "count": int(count)}
    return dataset.replace(audio=audio, donor_label=donor_label, correspondence_clean=clean,
                           correspondence_noise=info)


def apply_noise(dataset: MultimodalDataset, noise: NoiseConfig) -> MultimodalDataset:
    """Label noise first, then correspondence noise, with seeds derived from ``noise.seed``."""
    noise.validate()
    label_seed, corr_seed = np.random.SeedSequence(noise.seed).generate_state(2)
    out = inject_label_noise(dataset, noise.label_mode, noise.label_rate, int(label_seed))
    exclude = out.label_noisy if noise.disjoint else None
    return inject_correspondence_noise(out, noise.correspondence_rate, int(corr_seed), exclude=exclude)


def noise_audit(dataset: MultimodalDataset) -> dict:
    """Achieved noise rates and the flip map histogram (true -> observed counts)."""
    n = len(dataset)
    k = dataset.n_classes
    flips = dataset.label_noisy
    hist = np.zeros((k, k), dtype=np.int64)
    np.add.at(hist, (dataset.true_label[flips], dataset.observed_label[flips]), 1)
    mismatched = ~dataset.correspondence_clean
    return {
        "n": int(n),
        "label_flipped": int(flips.sum()),
        "label_rate_achieved": float(flips.mean()) if n else 0.0,
        "label_requested": dataset.label_noise,
        "correspondence_mismatched": int(mismatched.sum()),
        "correspondence_rate_achieved": float(mismatched.mean()) if n else 0.0,
        "correspondence_requested": dataset.correspondence_noise,
        "donor_same_class": int((dataset.donor_label[mismatched] == dataset.true_label[mismatched]).sum()),
        "overlap": int((flips & mismatched).sum()),
        "flip_map": hist.tolist(),
    }


def save(dataset: MultimodalDataset, path) -> None:
    arrays = {
        "visual": dataset.visual, "audio": dataset.audio,
        "true_label": dataset.true_label, "observed_label": dataset.observed_label,
        "correspondence_clean": dataset.correspondence_clean.astype(bool),
        "ids": dataset.ids, "donor_label": dataset.donor_label,
    }
    meta = {"n_classes": int(dataset.n_classes), "n": len(dataset),
            "d_v": int(dataset.d_v), "d_a": int(dataset.d_a),
            "label_noise": dataset.label_noise,
            "correspondence_noise": dataset.correspondence_noise}
    write_arrays(path, DATASET_KIND, arrays, meta)


def load(path) -> MultimodalDataset:
    arrays, meta = read_arrays(path, kind=DATASET_KIND)
    return MultimodalDataset(n_classes=int(meta["n_classes"]), label_noise=meta["label_noise"],
                             correspondence_noise=meta["correspondence_noise"], **arrays)


def save_splits(splits: Splits, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save(splits.train, d / "train.nmm")
    save(splits.test, d / "test.nmm")


def load_splits(directory) -> Splits:
    d = Path(directory)
    return Splits(train=load(d / "train.nmm"), test=load(d / "test.nmm"))
