"""Iterative two-phase training: warm-up, contrastive phase, KNN rectification, hybrid supervision."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .correction import fuse, knn_correct
from .model import ModelConfig, MultimodalModel
from .synthdata import MultimodalDataset

log = logging.getLogger(__name__)

VARIANTS = ("none", "ins-only", "cat-only", "full")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    contrastive_lr: float | None = None    # defaults to lr
    lr_schedule: str = "cosine"            # "cosine" decays per epoch over all epochs; "constant"
    tau1: float = 1.0
    tau2: float = 0.1
    eps_v: float = 0.5
    eps_a: float = 0.5
    similar_cap: int = 16
    sinkhorn_iterations: int = 3
    sinkhorn_reg: float = 0.05
    sinkhorn_mode: str = "soft"
    knn_k: int = 10
    knn_features: str = "cache"            # "cache": start-of-epoch features; "refresh": after the contrastive pass
    gamma_initial: float = 0.6
    gamma_final: float = 0.8
    gamma_switch: int = 15
    variant: str = "full"
    d: int = 32
    encoder_hidden: tuple[int, ...] = (64,)
    classifier_hidden: int = 64
    ae_hidden: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.warmup_epochs < 0 or self.epochs < self.warmup_epochs:
            raise ValueError(f"need 0 <= warmup_epochs <= epochs, got {self.warmup_epochs}/{self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.knn_features not in ("cache", "refresh"):
            raise ValueError(f"knn_features must be cache or refresh, got {self.knn_features!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        if self.sinkhorn_mode not in ("soft", "hard"):
            raise ValueError(f"sinkhorn_mode must be soft or hard, got {self.sinkhorn_mode!r}")
        for g in (self.gamma_initial, self.gamma_final):
            if not 0.0 <= g <= 1.0:
                raise ValueError(f"gamma values must lie in [0, 1], got {g}")
        if self.tau1 <= 0 or self.tau2 <= 0 or self.sinkhorn_reg <= 0:
            raise ValueError("temperatures and sinkhorn_reg must be positive")
        if self.knn_k < 1 or self.similar_cap < 1:
            raise ValueError("knn_k and similar_cap must be >= 1")

    def lr_scale(self, epoch: int) -> float:
        """Learning-rate multiplier for a (0-based, warm-up inclusive) epoch index."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return 1.0
        return float(0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs)))

    def gamma_at(self, epoch: int) -> float:
        """Weight on corrected labels for a (0-based, warm-up inclusive) epoch index."""
        return self.gamma_initial if epoch < self.gamma_switch else self.gamma_final

    def model_config(self, dataset: MultimodalDataset) -> ModelConfig:
        return ModelConfig(d_v=dataset.d_v, d_a=dataset.d_a, n_classes=dataset.n_classes,
                           d=self.d, encoder_hidden=tuple(self.encoder_hidden),
                           classifier_hidden=self.classifier_hidden, batch_size=self.batch_size,
                           ae_hidden=self.ae_hidden, seed=self.seed)


@dataclass
class EpochRecord:
    epoch: int
    gamma: float
    l_ins: float
    l_cat: float
    l_c: float
    l_s: float
    train_top1: float
    test_top1: float
    test_top5: float
    corrected_acc: float
    observed_acc: float
    omega_v_clean: float
    omega_v_mismatched: float
    omega_a_clean: float
    omega_a_mismatched: float
    ce_clean_label: float
    ce_noisy_label: float


REPORT_COLUMNS = [f.name for f in dataclasses.fields(EpochRecord)]


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    warmup: list[EpochRecord] = field(default_factory=list)
    omega_v: np.ndarray | None = None
    omega_a: np.ndarray | None = None
    corrected: np.ndarray | None = None
    ce_trace: list[np.ndarray] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return (self.records or self.warmup)[-1]

    def rows(self, include_warmup: bool = False) -> list[EpochRecord]:
        return (self.warmup if include_warmup else []) + self.records

    def to_csv(self, extra: dict | None = None, include_warmup: bool = False) -> str:
        """CSV text with one row per epoch; ``extra`` adds constant leading columns."""
        extra = extra or {}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(extra) + ["phase"] + REPORT_COLUMNS)
        for phase, recs in (("warmup", self.warmup if include_warmup else []),
                            ("iterative", self.records)):
            for r in recs:
                w.writerow(list(extra.values()) + [phase]
                           + [_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_jsonl(self, extra: dict | None = None) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps({**(extra or {}), **dataclasses.asdict(r)}, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    top1: float
    top5: float
    top5_degenerate: bool = False

    def __iter__(self):
        return iter((self.top1, self.top5))


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    # rank = number of classes scoring strictly higher than the true class
    true_score = logits[np.arange(len(labels)), labels][:, None]
    rank = (logits > true_score).sum(axis=1)
    return float((rank < k).mean())


def evaluate(model: MultimodalModel, test: MultimodalDataset) -> Evaluation:
    """Top-1 / top-5 accuracy against true labels.  With K <= 5 top-5 is 1.0 and flagged."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = model.logits(test.visual, test.audio)
    top1 = float((logits.argmax(axis=1) == test.true_label).mean())
    if test.n_classes <= 5:
        return Evaluation(top1, 1.0, True)
    return Evaluation(top1, topk_accuracy(logits, test.true_label, 5))


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the model, both optimizers and the shuffling generator for one run."""

    def __init__(self, model: MultimodalModel, train: MultimodalDataset, config: TrainConfig,
                 test: MultimodalDataset | None = None):
        config.validate()
        self.model = model
        self.train = train
        self.test = test
        self.config = config
        # separate shuffling streams so skipping the contrastive phase leaves the
        # supervised batch order unchanged
        self.rng = np.random.default_rng([config.seed, 1])
        self.con_rng = np.random.default_rng([config.seed, 2])
        self.sup_opt = T.Adam(model.supervised_params(), lr=config.lr)
        c_lr = config.lr if config.contrastive_lr is None else config.contrastive_lr
        self.con_opt = T.Adam(model.contrastive_params(), lr=c_lr)
        self._base_lr = (config.lr, c_lr)
        self.report = TrainReport()
        self.epoch = 0

    # -- helpers ------------------------------------------------------------
    def _batches(self, n: int, rng: np.random.Generator | None = None):
        order = (self.rng if rng is None else rng).permutation(n)
        b = self.config.batch_size
        return [order[s:s + b] for s in range(0, n, b)]

    def _step(self, opt: T.Adam, loss_fn, where: str) -> float:
        params = opt.params
        with T.Tape() as tape:
            loss = loss_fn()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at {where}")
        grads = tape.gradient(loss, list(params.values()))
        try:
            opt.step(dict(zip(params, grads)))
        except T.NonFiniteGradientError as err:
            raise TrainingDiverged(f"{err} at {where}") from None
        return value

    def _set_lr(self) -> None:
        scale = self.config.lr_scale(self.epoch)
        self.sup_opt.lr = self._base_lr[0] * scale
        self.con_opt.lr = self._base_lr[1] * scale

    # -- phases -------------------------------------------------------------
    def supervised_epoch(self, corrected: np.ndarray | None, gamma: float) -> list[float]:
        """One pass of hybrid supervision; ``corrected=None`` means plain CE on observed labels."""
        ds, losses = self.train, []
        for bi, idx in enumerate(self._batches(len(ds))):
            v, a, y = ds.visual[idx], ds.audio[idx], ds.observed_label[idx]
            if corrected is None:
                fn = lambda: L.cross_entropy(self.model.forward(v, a)[2], y)  # noqa: E731
            else:
                yc = corrected[idx]
                fn = lambda: L.hybrid_loss(self.model.forward(v, a)[2], y, yc, gamma)[0]  # noqa: E731
            losses.append(self._step(self.sup_opt, fn, f"epoch {self.epoch} supervised batch {bi}"))
        return losses

    def contrastive_epoch(self, weights: L.CorrespondenceWeights) -> tuple[float, float]:
        """One pass minimising L_ins + L_cat (restricted per variant); returns mean (L_ins, L_cat)."""
        cfg, ds, m = self.config, self.train, self.model
        use_ins = cfg.variant in ("full", "ins-only")
        use_cat = cfg.variant in ("full", "cat-only")
        ins_vals, cat_vals = [], []
        for bi, idx in enumerate(self._batches(len(ds), self.con_rng)):
            if not use_ins and len(idx) != cfg.batch_size:
                continue
            m.normalize_prototypes("proto_ins")
            m.normalize_prototypes("proto_cat")
            v, a = ds.visual[idx], ds.audio[idx]
            w_v, w_a = weights.omega_v[idx], weights.omega_a[idx]
            parts = {}

            def loss_fn():
                z_v = m.encode("visual", v)
                z_a = m.encode("audio", a)
                total = None
                if use_ins:
                    s_v = L.prototype_scores(z_v, m.params["proto_ins"])
                    s_a = L.prototype_scores(z_a, m.params["proto_ins"])
                    q_v = L.sinkhorn_assign(s_v.data, cfg.sinkhorn_iterations, cfg.sinkhorn_reg,
                                            cfg.sinkhorn_mode)
                    q_a = L.sinkhorn_assign(s_a.data, cfg.sinkhorn_iterations, cfg.sinkhorn_reg,
                                            cfg.sinkhorn_mode)
                    p_v = T.softmax(T.scale(s_v, 1.0 / cfg.tau2), axis=1)
                    p_a = T.softmax(T.scale(s_a, 1.0 / cfg.tau2), axis=1)
                    l_ins = L.instance_loss(p_v, p_a, q_v, q_a, w_v, w_a)
                    parts["ins"] = l_ins.item()
                    total = l_ins
                if use_cat and len(idx) == cfg.batch_size:
                    P_v, P_a = L.category_representations(z_v, z_a, m.params["proto_cat"], cfg.tau2,
                                                          cfg.batch_size)
                    _, R_v = m.autoencode(P_v)
                    _, R_a = m.autoencode(P_a)
                    l_cat = L.category_loss(P_v, P_a, R_v, R_a, cfg.tau1).total
                    parts["cat"] = l_cat.item()
                    total = l_cat if total is None else L.contrastive_loss(total, l_cat)
                return total

            self._step(self.con_opt, loss_fn, f"epoch {self.epoch} contrastive batch {bi}")
            if "ins" in parts:
                ins_vals.append(parts["ins"])
            if "cat" in parts:
                cat_vals.append(parts["cat"])
        mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
        return mean(ins_vals), mean(cat_vals)

    def estimate(self) -> tuple[np.ndarray, np.ndarray, L.CorrespondenceWeights]:
        """Feature cache for the whole training split plus correspondence weights."""
        cfg = self.config
        z_v, z_a = self.model.features(self.train.visual, self.train.audio)
        w = L.correspondence_weights(z_v, z_a, cfg.eps_v, cfg.eps_a, cfg.similar_cap, cfg.tau1)
        return z_v, z_a, w

    # -- diagnostics --------------------------------------------------------
    def _record(self, gamma, l_ins, l_cat, l_s, corrected, weights) -> EpochRecord:
        ds = self.train
        logits = self.model.logits(ds.visual, ds.audio)
        ce = L.per_sample_cross_entropy(logits, ds.observed_label).data
        self.report.ce_trace.append(ce)
        noisy = ds.label_noisy
        clean_c = ds.correspondence_clean
        ev = evaluate(self.model, self.test) if self.test is not None and len(self.test) else \
            Evaluation(float("nan"), float("nan"))
        nanmean = lambda x: float(x.mean()) if x.size else float("nan")  # noqa: E731
        corrected_acc = nanmean(corrected == ds.true_label) if corrected is not None else float("nan")
        wv = weights.omega_v if weights is not None else np.full(len(ds), np.nan)
        wa = weights.omega_a if weights is not None else np.full(len(ds), np.nan)
        return EpochRecord(
            epoch=self.epoch, gamma=gamma, l_ins=l_ins, l_cat=l_cat, l_c=l_ins + l_cat, l_s=l_s,
            train_top1=nanmean(logits.argmax(axis=1) == ds.observed_label),
            test_top1=ev.top1, test_top5=ev.top5,
            corrected_acc=corrected_acc,
            observed_acc=nanmean(ds.observed_label == ds.true_label),
            omega_v_clean=nanmean(wv[clean_c]), omega_v_mismatched=nanmean(wv[~clean_c]),
            omega_a_clean=nanmean(wa[clean_c]), omega_a_mismatched=nanmean(wa[~clean_c]),
            ce_clean_label=nanmean(ce[~noisy]), ce_noisy_label=nanmean(ce[noisy]),
        )

    # -- drivers ------------------------------------------------------------
    def warmup(self, epochs: int | None = None) -> None:
        """Plain cross-entropy on observed labels (gamma = 0) for ``epochs`` epochs."""
        epochs = self.config.warmup_epochs if epochs is None else epochs
        for _ in range(epochs):
            self._set_lr()
            losses = self.supervised_epoch(None, 0.0)
            self.report.batch_losses.extend(losses)
            self.report.warmup.append(self._record(0.0, 0.0, 0.0, float(np.mean(losses)), None, None))
            self.epoch += 1

    def iterate(self, epochs: int) -> None:
        cfg = self.config
        for _ in range(epochs):
            self._set_lr()
            gamma = cfg.gamma_at(self.epoch)
            z_v, z_a, weights = self.estimate()
            l_ins = l_cat = 0.0
            if cfg.variant != "none":
                l_ins, l_cat = self.contrastive_epoch(weights)
            if cfg.knn_features == "refresh" and cfg.variant != "none":
                z_v, z_a = self.model.features(self.train.visual, self.train.audio)
            corrected = knn_correct(fuse(z_v, z_a), self.train.observed_label, cfg.knn_k,
                                    self.train.n_classes).labels
            losses = self.supervised_epoch(corrected, gamma)
            self.report.batch_losses.extend(losses)
            self.report.omega_v, self.report.omega_a = weights.omega_v, weights.omega_a
            self.report.corrected = corrected
            self.report.records.append(
                self._record(gamma, l_ins, l_cat, float(np.mean(losses)), corrected, weights))
            log.info("epoch %d gamma=%.2f L_ins=%.4f L_cat=%.4f L_s=%.4f test_top1=%.4f corr_acc=%.4f",
                     self.epoch, gamma, l_ins, l_cat, self.report.records[-1].l_s,
                     self.report.records[-1].test_top1, self.report.records[-1].corrected_acc)
            self.epoch += 1


def build_model(train: MultimodalDataset, config: TrainConfig) -> MultimodalModel:
    return MultimodalModel(config.model_config(train))


def warmup(model: MultimodalModel, train: MultimodalDataset, config: TrainConfig,
           test: MultimodalDataset | None = None, epochs: int | None = None
           ) -> tuple[MultimodalModel, TrainReport]:
    """Warm-up only: plain CE on observed labels.  Returns the model and per-epoch diagnostics."""
    tr = Trainer(model, train, config, test)
    tr.warmup(epochs)
    return model, tr.report


def run(model: MultimodalModel, train: MultimodalDataset, config: TrainConfig,
        test: MultimodalDataset | None = None) -> tuple[MultimodalModel, TrainReport]:
    """Full iterative procedure: warm-up, then ``epochs - warmup_epochs`` two-phase epochs."""
    tr = Trainer(model, train, config, test)
    tr.warmup()
    tr.iterate(config.epochs - config.warmup_epochs)
    return model, tr.report


def baseline(train: MultimodalDataset, config: TrainConfig,
             test: MultimodalDataset | None = None) -> tuple[MultimodalModel, TrainReport]:
    """Plain cross-entropy for the same total number of epochs and the same seed."""
    model = build_model(train, config)
    return warmup(model, train, config, test, epochs=config.epochs)


def ablate(config: TrainConfig, train: MultimodalDataset, test: MultimodalDataset | None = None,
           variants=VARIANTS) -> dict[str, TrainReport]:
    """Run the procedure once per contrastive-phase variant, all from the same seed."""
    out = {}
    for variant in variants:
        cfg = dataclasses.replace(config, variant=variant)
        _, report = run(build_model(train, cfg), train, cfg, test)
        out[variant] = report
    return out
