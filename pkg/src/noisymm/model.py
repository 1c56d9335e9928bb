"""Encoders, fusion classifier, prototype banks and the tied-weight autoencoder."""
from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .storage import read_arrays, write_arrays
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "noisymm.checkpoint"

MODALITIES = ("visual", "audio")
_PREFIX = {"visual": "enc_v", "audio": "enc_a"}


@dataclass(frozen=True)
class ModelConfig:
    d_v: int
    d_a: int
    n_classes: int
    d: int = 32
    encoder_hidden: tuple[int, ...] = (64,)
    classifier_hidden: int = 64
    batch_size: int = 64          # autoencoder input width
    ae_hidden: int | None = None  # defaults to batch_size // 2
    ae_activation: str = "relu"
    seed: int = 0

    @property
    def ae_width(self) -> int:
        return self.ae_hidden if self.ae_hidden is not None else max(1, self.batch_size // 2)


def _he(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def random_unit_rows(rng, rows: int, cols: int) -> np.ndarray:
    x = rng.standard_normal((rows, cols))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class MultimodalModel:
    """All trainable tensors live in ``params`` under stable names.

    Groups: ``enc_v.*`` / ``enc_a.*`` (modality encoders), ``cls.*`` (fusion
    classifier), ``proto_ins`` / ``proto_cat`` (prototype banks C and C'),
    ``ae.W`` (tied autoencoder weight; the decoder uses its transpose).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        for modality, d_in in (("visual", config.d_v), ("audio", config.d_a)):
            sizes = (d_in, *config.encoder_hidden, config.d)
            for layer, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                self._add(f"{_PREFIX[modality]}.W{layer}", _he(rng, a, b))
                self._add(f"{_PREFIX[modality]}.b{layer}", np.zeros(b))
        self._add("cls.W0", _he(rng, 2 * config.d, config.classifier_hidden))
        self._add("cls.b0", np.zeros(config.classifier_hidden))
        self._add("cls.W1", _he(rng, config.classifier_hidden, config.n_classes))
        self._add("cls.b1", np.zeros(config.n_classes))
        self._add("proto_ins", random_unit_rows(rng, config.n_classes, config.d))
        self._add("proto_cat", random_unit_rows(rng, config.n_classes, config.d))
        self._add("ae.W", rng.standard_normal((config.batch_size, config.ae_width))
                  / np.sqrt(config.batch_size))
        self._proto_rng = np.random.default_rng([config.seed, 7919])

    def _add(self, name, value):
        self.params[name] = Tensor(value, name=name)

    # -- parameter groups ---------------------------------------------------
    def group(self, *prefixes: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefixes)}

    def encoder_params(self) -> dict[str, Tensor]:
        return self.group("enc_v.", "enc_a.")

    def supervised_params(self) -> dict[str, Tensor]:
        return self.group("enc_v.", "enc_a.", "cls.")

    def contrastive_params(self) -> dict[str, Tensor]:
        return self.group("enc_v.", "enc_a.", "proto_ins", "proto_cat", "ae.")

    def n_layers(self, modality: str) -> int:
        return len(self.config.encoder_hidden) + 1

    # -- forward pieces -----------------------------------------------------
    def encode(self, modality: str, x) -> Tensor:
        """Map raw modality input (vector or batch of rows) into the common space.

        Every layer, including the last, is followed by ReLU.
        """
        if modality not in _PREFIX:
            raise ValueError(f"unknown modality {modality!r}")
        x = T.as_tensor(x)
        single = x.ndim == 1
        if single:
            x = T.reshape(x, (1, -1))
        expected = self.config.d_v if modality == "visual" else self.config.d_a
        if x.ndim != 2 or x.shape[1] != expected:
            raise ShapeError(f"{modality} input must have {expected} features, got shape {x.shape}")
        h = x
        prefix = _PREFIX[modality]
        for layer in range(self.n_layers(modality)):
            h = T.relu(T.add(T.matmul(h, self.params[f"{prefix}.W{layer}"]),
                             self.params[f"{prefix}.b{layer}"]))
        return T.reshape(h, (h.shape[1],)) if single else h

    def classify(self, z_v, z_a) -> Tensor:
        """Two fully connected layers over ``concat(z_v, z_a)``; ReLU after the first only."""
        z_v, z_a = T.as_tensor(z_v), T.as_tensor(z_a)
        single = z_v.ndim == 1
        if single:
            z_v, z_a = T.reshape(z_v, (1, -1)), T.reshape(z_a, (1, -1))
        d = self.config.d
        if z_v.shape[-1] != d or z_a.shape[-1] != d or z_v.shape[0] != z_a.shape[0]:
            raise ShapeError(f"classify expects two (B, {d}) features, got {z_v.shape} and {z_a.shape}")
        h = T.relu(T.add(T.matmul(T.concat([z_v, z_a], axis=1), self.params["cls.W0"]),
                         self.params["cls.b0"]))
        logits = T.add(T.matmul(h, self.params["cls.W1"]), self.params["cls.b1"])
        return T.reshape(logits, (logits.shape[1],)) if single else logits

    def forward(self, visual, audio) -> tuple[Tensor, Tensor, Tensor]:
        z_v = self.encode("visual", visual)
        z_a = self.encode("audio", audio)
        return z_v, z_a, self.classify(z_v, z_a)

    def logits(self, visual, audio, chunk: int = 4096) -> np.ndarray:
        """Untracked logits for a whole split."""
        out = []
        for s in range(0, len(visual), chunk):
            out.append(self.forward(visual[s:s + chunk], audio[s:s + chunk])[2].data)
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))

    def features(self, visual, audio) -> tuple[np.ndarray, np.ndarray]:
        return self.encode("visual", visual).data, self.encode("audio", audio).data

    def normalize_prototypes(self, which: str = "proto_ins") -> None:
        """Rescale each prototype row of a bank to unit L2 norm, in place.

        A zero row is replaced by a fresh seeded random unit vector.
        """
        bank = self.params[which].data
        norms = np.linalg.norm(bank, axis=1)
        dead = norms == 0
        if dead.any():
            log.warning("%s: re-initialising %d zero prototype(s)", which, int(dead.sum()))
            bank[dead] = random_unit_rows(self._proto_rng, int(dead.sum()), bank.shape[1])
            norms[dead] = 1.0
        bank /= norms[:, None]

    def autoencode(self, P) -> tuple[Tensor, Tensor]:
        """Hidden code ``U = act(P W)`` and tied reconstruction ``P' = U W^T``."""
        P = T.as_tensor(P)
        W = self.params["ae.W"]
        if P.ndim != 2 or P.shape[1] != W.shape[0]:
            raise ShapeError(f"autoencoder expects rows of width {W.shape[0]}, got shape {P.shape}")
        pre = T.matmul(P, W)
        if self.config.ae_activation == "relu":
            U = T.relu(pre)
        elif self.config.ae_activation == "linear":
            U = pre
        else:
            raise ValueError(f"unknown autoencoder activation {self.config.ae_activation!r}")
        return U, T.matmul(U, T.transpose(W))

    # -- persistence --------------------------------------------------------
    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k in self.params:
                if self.params[k].shape != v.shape:
                    raise ShapeError(f"{k}: checkpoint shape {v.shape}, model {self.params[k].shape}")
                self.params[k].data[...] = v

    def copy(self) -> "MultimodalModel":
        other = MultimodalModel.__new__(MultimodalModel)
        other.config = self.config
        other.params = {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}
        other._proto_rng = copy.deepcopy(self._proto_rng)
        return other


def save_checkpoint(model: MultimodalModel, path, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    arrays = model.snapshot()
    if extra:
        arrays.update(extra)
    info = {"model_config": _config_dict(model.config), **(meta or {})}
    write_arrays(path, CHECKPOINT_KIND, arrays, info)


def load_checkpoint(path) -> tuple[MultimodalModel, dict, dict[str, np.ndarray]]:
    """Returns the model, the metadata and any non-parameter arrays stored alongside."""
    arrays, meta = read_arrays(path, kind=CHECKPOINT_KIND)
    cfg = dict(meta["model_config"])
    cfg["encoder_hidden"] = tuple(cfg["encoder_hidden"])
    model = MultimodalModel(ModelConfig(**cfg))
    model.restore(arrays)
    extra = {k: v for k, v in arrays.items() if k not in model.params}
    return model, meta, extra


def _config_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["encoder_hidden"] = list(cfg.encoder_hidden)
    return d
