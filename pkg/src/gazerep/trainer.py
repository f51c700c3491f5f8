"""Training loops: attention pre-training (saliency or gaze) and classification fine-tuning."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .attnmodel.config import probe_extents
from .attnmodel.losses import loss_gaze, loss_saliency_logits, soft_argmax
from .attnmodel.network import Network, attention_forward
from .dataio import augment as aug
from .dataio.dataset import Dataset
from .dataio.sampler import balanced_sampler
from .evaluation.metrics import confusion_matrix, macro_prf
from .gazetarget import SaliencyConfig, geometric_median, saliency_target
from .numcore import functional as F
from .numcore.optim import SGD
from .numcore.rng import rng_stream
from .numcore.tensor import NonFiniteError, backprop, no_grad

log = logging.getLogger(__name__)

TASKS = ("saliency", "gaze", "classify")

# stream ids for the trainer's random draws
_ORDER, _SAMPLE, _BALANCE = 0x07DE, 0x5A3E, 0xBA1A


class TrainingDiverged(RuntimeError):
    """A non-finite loss or gradient; carries where it happened."""

    def __init__(self, epoch: int, batch: int, lr: float, detail: str):
        super().__init__(f"non-finite training loss at epoch {epoch}, batch {batch}, lr {lr:g}: {detail}")
        self.epoch, self.batch, self.lr = epoch, batch, lr


@dataclass(frozen=True)
class TrainConfig:
    task: str = "saliency"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 8
    decay_epochs: tuple = (6,)
    decay_factor: float = 0.1
    seed: int = 0
    samples_per_epoch: int | None = None  # None: one shuffled pass over the training set
    sigma: float = 8.0  # saliency Gaussian std, pixels at model input resolution
    augment: bool = True
    freeze_backbone: bool = False  # classification only: train the head alone
    random_init_lr_scale: float = 4.0  # classification only: lr factor when starting from random weights

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be finite and non-negative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"decay epochs {d} must be strictly increasing")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ValueError(f"decay epochs {d} must lie in [0, {self.epochs})")
        if not (0 < self.decay_factor <= 1):
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not (self.random_init_lr_scale > 0 and math.isfinite(self.random_init_lr_scale)):
            raise ValueError("random_init_lr_scale must be finite and positive")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_json(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**obj)


PRESETS: dict[str, TrainConfig] = {
    "paper-saliency": TrainConfig("saliency", 0.1, 0.9, 1e-4, 32, 8, (6,)),
    "paper-gaze": TrainConfig("gaze", 0.01, 0.9, 1e-4, 32, 10, (8,)),
    "paper-finetune": TrainConfig("classify", 0.01, 0.9, 5e-4, 16, 50, (20, 35), samples_per_epoch=1024),
    # desk scale: same optimizer settings, fewer epochs, decay over the final quarter
    "mini-saliency": TrainConfig("saliency", 0.1, 0.9, 1e-4, 32, 12, (9,), samples_per_epoch=384, sigma=4.0),
    "mini-gaze": TrainConfig("gaze", 0.003, 0.9, 1e-4, 32, 15, (12,), samples_per_epoch=384, sigma=4.0),
    # fine-tuning lr and random-init factor picked on validation F1 for each init separately
    "mini-finetune": TrainConfig("classify", 0.12, 0.9, 5e-4, 16, 15, (6, 11), samples_per_epoch=768,
                                 random_init_lr_scale=2.5),
}


def for_random_init(cfg: TrainConfig) -> TrainConfig:
    """Fine-tuning from random weights uses a larger step."""
    return cfg.with_(lr=cfg.lr * cfg.random_init_lr_scale)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.decay_factor ** sum(1 for e in cfg.decay_epochs if epoch >= e)


# -- logging -------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float | None
    val_metric: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    path: Path | None = None

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")

    def column(self, key: str) -> list:
        return [getattr(r, key) for r in self.records]


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- shared pieces -------------------------------------------------------------------

def epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    """Training indices visited in ``epoch`` (a fresh shuffle, cycled to the requested length)."""
    rng = rng_stream(cfg.seed, _ORDER, epoch)
    m = cfg.samples_per_epoch or n
    reps = -(-m // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:m]


def sample_rng(cfg: TrainConfig, epoch: int, position: int) -> np.random.Generator:
    """Per-sample augmentation stream keyed by (seed, epoch, position in epoch)."""
    return rng_stream(cfg.seed, _SAMPLE, epoch, position)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def _check_step(loss, epoch, batch, lr, params):
    v = float(loss.item())
    if not math.isfinite(v):
        raise TrainingDiverged(epoch, batch, lr, f"loss {v}")
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(epoch, batch, lr, f"gradient of {p.name}")
    return v


def _snapshot(net: Network) -> dict:
    return {k: v.copy() for k, v in net.state().items()}


# -- attention pre-training ------------------------------------------------------------

def head_geometry(net: Network) -> tuple[int, int, int, int, int]:
    H, W = net.config.input_size
    Hd, Wd = list(probe_extents(net.config, "attention").values())[-1]
    f = H // Hd
    if f * Hd != H or f * Wd != W:
        raise ValueError(f"input {H}x{W} is not an integer multiple of the head grid {Hd}x{Wd}")
    return H, W, Hd, Wd, f


def _attention_targets(task: str, samples, H: int, W: int, factor: int, sal: SaliencyConfig) -> np.ndarray:
    if task == "saliency":
        return np.stack([saliency_target(s.gaze, H, W, factor, sal) for s in samples])
    return np.stack([geometric_median(s.gaze).point for s in samples])


def _attention_loss(net: Network, task: str, x: np.ndarray, target: np.ndarray, training: bool):
    A, S = attention_forward(net, x, training=training)
    if task == "saliency":
        return loss_saliency_logits(target, A)
    H, W = net.config.input_size
    return loss_gaze(target, soft_argmax(S, H, W))


def _gaze_indices(ds: Dataset) -> list[int]:
    return [i for i, r in enumerate(ds.records) if r.gaze]


def attention_val_loss(net: Network, ds: Dataset, task: str, sigma: float, batch_size: int = 32) -> float:
    """Mean per-frame task loss on un-augmented frames, eval mode."""
    H, W, _, _, f = head_geometry(net)
    sal = SaliencyConfig(sigma)
    idx = _gaze_indices(ds)
    if not idx:
        raise ValueError("validation set has no frames with gaze")
    total = 0.0
    for a, b in _batches(len(idx), batch_size):
        samples = [aug.prepare_eval(ds[i], (H, W)) for i in idx[a:b]]
        x = np.stack([s.image for s in samples]).astype(net.dtype)
        with no_grad():
            loss = _attention_loss(net, task, x, _attention_targets(task, samples, H, W, f, sal), False)
        total += float(loss.item()) * (b - a)
    return total / len(idx)


def train_attention(net: Network, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                    log_path=None, progress: Callable[[EpochRecord], None] | None = None,
                    augment_cfg: aug.AugmentConfig = aug.ATTENTION) -> tuple[Network, TrainLog]:
    """SGD on the saliency (KL) or gaze (soft-argmax distance) objective.

    The network is trained in place; on return it holds the state with the
    lowest validation loss (the last state when ``val`` is None).
    """
    if cfg.task not in ("saliency", "gaze"):
        raise ValueError(f"train_attention needs task saliency or gaze, got {cfg.task!r}")
    if net.mode != "attention":
        raise ValueError("train_attention expects an attention-mode network")
    idx = _gaze_indices(train)
    if not idx:
        raise ValueError("training set has no frames with gaze")
    H, W, _, _, f = head_geometry(net)
    sal = SaliencyConfig(cfg.sigma)
    params = net.backbone_params() + net.head_params("attention")
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    tlog = TrainLog(path=Path(log_path) if log_path else None)
    if tlog.path is not None:
        tlog.path.write_text("")
    best, best_loss = None, math.inf
    augment = cfg.augment and augment_cfg != aug.IDENTITY
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        order = epoch_order(cfg, epoch, len(idx))
        run = 0.0
        for bi, (a, b) in enumerate(_batches(len(order), cfg.batch_size)):
            samples = []
            for pos in range(a, b):
                s = train[idx[order[pos]]]
                samples.append(aug.augment_attention(s, sample_rng(cfg, epoch, pos), augment_cfg, (H, W))
                               if augment else aug.prepare_eval(s, (H, W)))
            x = np.stack([s.image for s in samples]).astype(net.dtype)
            target = _attention_targets(cfg.task, samples, H, W, f, sal)
            opt.zero_grad()
            try:
                loss = _attention_loss(net, cfg.task, x, target, True)
                backprop(loss, params)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, bi, lr, str(exc)) from exc
            run += _check_step(loss, epoch, bi, lr, params) * (b - a)
            opt.step(lr)
        val_loss = attention_val_loss(net, val, cfg.task, cfg.sigma) if val is not None else None
        rec = EpochRecord(epoch, lr, run / len(order), val_loss, None, time.perf_counter() - t0)
        tlog.append(rec)
        log.info("epoch %d lr %.4g train %.4f val %s", epoch, lr, rec.train_loss, val_loss)
        if progress:
            progress(rec)
        if val_loss is not None and val_loss < best_loss:
            best, best_loss, tlog.best_epoch = _snapshot(net), val_loss, epoch
    if best is not None:
        net.load_state(best)
    return net, tlog


# -- classification fine-tuning ----------------------------------------------------------

def _labeled(ds: Dataset) -> list[int]:
    return [i for i, r in enumerate(ds.records) if r.label is not None]


def _class_logits(net: Network, x: np.ndarray, training: bool, freeze: bool):
    feats = net.features(x, training=training and not freeze)
    return net.classification_head(next(reversed(feats.values())))


def classify_dataset(net: Network, ds: Dataset, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray, float]:
    """(true, predicted, mean cross-entropy) over the labeled frames, eval mode."""
    H, W = net.config.input_size
    idx = _labeled(ds)
    if not idx:
        raise ValueError("dataset has no labeled frames")
    true, pred, total = [], [], 0.0
    for a, b in _batches(len(idx), batch_size):
        samples = [aug.prepare_eval(ds[i], (H, W)) for i in idx[a:b]]
        x = np.stack([s.image for s in samples]).astype(net.dtype)
        y = np.array([ds.label_index(s.label) for s in samples])
        with no_grad():
            z = _class_logits(net, x, False, False)
            total += float(F.cross_entropy(z, y).item()) * (b - a)
        true.append(y)
        pred.append(np.argmax(z.data, axis=1))
    return np.concatenate(true), np.concatenate(pred), total / len(idx)


def class_report(net: Network, ds: Dataset, batch_size: int = 32):
    true, pred, _ = classify_dataset(net, ds, batch_size)
    return macro_prf(confusion_matrix(true, pred, len(ds.classes)), ds.classes, ds.foreground)


def finetune_classifier(net: Network, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                        log_path=None, progress: Callable[[EpochRecord], None] | None = None,
                        augment_cfg: aug.AugmentConfig = aug.CLASSIFICATION) -> tuple[Network, TrainLog]:
    """Class-balanced SGD with cross-entropy; keeps the state with the best validation macro-F1."""
    if cfg.task != "classify":
        raise ValueError(f"finetune_classifier needs task 'classify', got {cfg.task!r}")
    if net.mode != "classification":
        raise ValueError("finetune_classifier expects a classification-mode network; undilate first")
    if net.classification_head is None:
        net.attach_classifier(len(train.classes))
    idx = _labeled(train)
    labels = [train.records[i].label for i in idx]
    present = set(labels)
    absent = [c for c in train.classes if c not in present]
    if absent:
        raise ValueError(f"class(es) absent from the training split: {', '.join(absent)}")
    H, W = net.config.input_size
    head = net.head_params("classification")
    params = head if cfg.freeze_backbone else net.backbone_params() + head
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    n = cfg.samples_per_epoch or len(idx)
    tlog = TrainLog(path=Path(log_path) if log_path else None)
    if tlog.path is not None:
        tlog.path.write_text("")
    best, best_f1 = None, -1.0
    augment = cfg.augment and augment_cfg != aug.IDENTITY
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        stream = balanced_sampler(labels, train.classes, train.background, rng_stream(cfg.seed, _BALANCE, epoch))
        order = [next(stream) for _ in range(n)]
        run = 0.0
        for bi, (a, b) in enumerate(_batches(n, cfg.batch_size)):
            samples = []
            for pos in range(a, b):
                s = train[idx[order[pos]]]
                samples.append(aug.augment_classification(s, sample_rng(cfg, epoch, pos), augment_cfg, (H, W))
                               if augment else aug.prepare_eval(s, (H, W)))
            x = np.stack([s.image for s in samples]).astype(net.dtype)
            y = np.array([train.label_index(s.label) for s in samples])
            opt.zero_grad()
            try:
                loss = F.cross_entropy(_class_logits(net, x, True, cfg.freeze_backbone), y)
                backprop(loss, params, allow_unused=cfg.freeze_backbone)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, bi, lr, str(exc)) from exc
            run += _check_step(loss, epoch, bi, lr, params) * (b - a)
            opt.step(lr)
        val_loss = val_f1 = None
        if val is not None:
            true, pred, val_loss = classify_dataset(net, val)
            val_f1 = macro_prf(confusion_matrix(true, pred, len(val.classes)), val.classes, val.foreground).macro_f1
        rec = EpochRecord(epoch, lr, run / n, val_loss, val_f1, time.perf_counter() - t0)
        tlog.append(rec)
        log.info("epoch %d lr %.4g train %.4f val f1 %s", epoch, lr, rec.train_loss, val_f1)
        if progress:
            progress(rec)
        if val_f1 is not None and val_f1 > best_f1:
            best, best_f1, tlog.best_epoch = _snapshot(net), val_f1, epoch
    if best is not None:
        net.load_state(best)
    return net, tlog
