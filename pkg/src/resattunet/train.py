"""Optimization loop: step-decay schedule, Adam/SGD, epochs, evaluation, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as losses
from .data import BandStats, Manifest, PatchSample, compute_band_stats, iter_batches, label_distribution, load_split, standardize
from .metrics import MetricReport, confusion_matrix, metric_report, predict_classes
from .model import ResAttUNet
from .nn import CheckpointError, ParameterStore, read_checkpoint, write_checkpoint
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOSSES = ("weighted_xent", "focal", "dice", "xent_plus_dice")
OPTIMIZERS = ("adam", "sgd")
CHECKPOINT_VERSION = 1
# wall time lives in a sidecar so the training log itself is reproducible
LOG_HEADER = "epoch,lr,train_loss,val_loss"
TIMING_HEADER = "epoch,seconds"


@dataclass
class TrainConfig:
    epochs: int = 200
    initial_lr: float = 1e-3
    decay_factor: float = 0.5
    decay_interval_epochs: int = 40
    batch_size: int = 8
    loss: str = "weighted_xent"
    focal_gamma: float = 2.0
    dice_eps: float = 1.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    grad_clip: float | None = 5.0
    shuffle: bool = True
    flips: bool = False
    seed: int = 0
    eval_every: int = 1
    class_counts: dict[str, int] | None = None

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval_epochs < 1:
            raise ValueError("decay_interval_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_interval_epochs)


# --- optimizers ----------------------------------------------------------------

def _check_finite(store: ParameterStore) -> None:
    for name, p in store.items():
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")


class Adam:
    def __init__(self, store: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in store.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in store.items())

    def step(self, lr: float) -> None:
        _check_finite(self.store)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.store.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        out["__step__"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, state) -> None:
        for k in self.m:
            self.m[k][...] = state[f"adam.m.{k}"]
            self.v[k][...] = state[f"adam.v.{k}"]
        self.t = int(state["__step__"][0])


class SGD:
    def __init__(self, store: ParameterStore, momentum=0.9):
        self.store = store
        self.momentum = momentum
        self.t = 0
        self.vel = OrderedDict((k, np.zeros_like(p.data)) for k, p in store.items())

    def step(self, lr: float) -> None:
        _check_finite(self.store)
        self.t += 1
        for name, p in self.store.items():
            vel = self.vel[name]
            vel *= self.momentum
            vel += p.grad
            p.data -= lr * vel

    def state(self):
        out = OrderedDict((f"sgd.v.{k}", v) for k, v in self.vel.items())
        out["__step__"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, state) -> None:
        for k in self.vel:
            self.vel[k][...] = state[f"sgd.v.{k}"]
        self.t = int(state["__step__"][0])


def adam_step(store: ParameterStore, opt: Adam, lr: float) -> None:
    opt.step(lr)


def make_optimizer(store: ParameterStore, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(store, cfg.momentum)


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in store.grads()))
    if total > max_norm:
        scale = max_norm / total
        for g in store.grads():
            g *= g.dtype.type(scale)
    return total


# --- loss dispatch -------------------------------------------------------------

def compute_loss(logits: Tensor, masks: np.ndarray, cfg: TrainConfig, weights) -> losses.LossValue:
    if cfg.loss == "weighted_xent":
        return losses.weighted_cross_entropy(logits, masks, weights)
    if cfg.loss == "focal":
        return losses.focal_loss(logits, masks, cfg.focal_gamma)
    if cfg.loss == "dice":
        return losses.dice_loss(logits, masks, cfg.dice_eps)
    return losses.xent_plus_dice(logits, masks, weights, cfg.dice_eps)


# --- training state ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    seconds: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.train_loss!r},{self.val_loss!r}"

    def timing_row(self) -> str:
        return f"{self.epoch},{self.seconds:.3f}"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    reports: dict[str, dict] = field(default_factory=dict)

    def to_csv(self) -> str:
        return "\n".join([LOG_HEADER, *(r.csv_row() for r in self.records)]) + "\n"

    def timing_csv(self) -> str:
        return "\n".join([TIMING_HEADER, *(r.timing_row() for r in self.records)]) + "\n"


class Trainer:
    """Owns a model, its parameter store, the optimizer, and the class weights."""

    def __init__(self, model: ResAttUNet, cfg: TrainConfig, weights: losses.ClassWeights | None = None):
        self.model = model
        self.cfg = cfg
        self.store = model.parameters()
        self.opt = make_optimizer(self.store, cfg)
        self.weights = weights
        self.epoch = 0  # next epoch to run
        self.band_stats: BandStats | None = None

    def train_epoch(self, samples: list[PatchSample], epoch: int) -> float:
        """One pass over ``samples``; returns the normalizer-weighted mean batch loss.

        For unweighted losses the normalizer is the valid pixel count.
        """
        if not samples:
            raise ValueError("training split is empty")
        cfg = self.cfg
        lr = lr_schedule(cfg, epoch)
        shuffle = cfg.seed + epoch if cfg.shuffle else None
        flips = cfg.seed + epoch + 7919 if cfg.flips else None
        total = norm = 0.0
        for images, masks, ids in iter_batches(samples, cfg.batch_size, shuffle, flips):
            if not np.any(masks != losses.IGNORE_INDEX):
                log.warning("skipping batch %s: no labeled pixels", ids)
                continue
            self.store.zero_grads()
            with Tape() as tape:
                lv = compute_loss(self.model(Tensor(images)), masks, cfg, self.weights)
            tape.backward(lv.tensor)
            if cfg.grad_clip:
                clip_grad_norm(self.store, cfg.grad_clip)
            self.opt.step(lr)
            total += lv.value * lv.normalizer
            norm += lv.normalizer
        self.epoch = epoch + 1
        return total / norm if norm else float("nan")

    def loss_on(self, samples: list[PatchSample]) -> float:
        total = norm = 0.0
        for images, masks, _ in iter_batches(samples, self.cfg.batch_size):
            if not np.any(masks != losses.IGNORE_INDEX):
                continue
            lv = compute_loss(self.model(Tensor(images)), masks, self.cfg, self.weights)
            total += lv.value * lv.normalizer
            norm += lv.normalizer
        return total / norm if norm else float("nan")

    # checkpoints

    def checkpoint_save(self, path) -> None:
        records: OrderedDict[str, np.ndarray] = OrderedDict()
        records["__format_version__"] = np.array([CHECKPOINT_VERSION], dtype=np.float32)
        records["__epoch__"] = np.array([self.epoch], dtype=np.float32)
        for k, p in self.store.items():
            records[k] = p.data
        records.update(self.opt.state())
        if self.band_stats is not None:
            records["__band_mean__"] = self.band_stats.mean
            records["__band_std__"] = self.band_stats.std
        write_checkpoint(path, records)

    def checkpoint_load(self, path) -> None:
        state = read_checkpoint(path)
        version = state.get("__format_version__")
        if version is None or int(version[0]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {None if version is None else int(version[0])}")
        needed = [k for k in self.opt.state() if k not in state]
        if needed:
            raise CheckpointError(f"{path}: missing optimizer records {needed[:3]}")
        self.store.load_state(state)
        self.opt.load_state(state)
        self.epoch = int(state["__epoch__"][0])
        if "__band_mean__" in state:
            self.band_stats = BandStats(state["__band_mean__"].astype(np.float64), state["__band_std__"].astype(np.float64))


def checkpoint_save(trainer: Trainer, path) -> None:
    trainer.checkpoint_save(path)


def checkpoint_load(trainer: Trainer, path) -> None:
    trainer.checkpoint_load(path)


def load_model_weights(model: ResAttUNet, path) -> BandStats | None:
    """Load parameters (and band stats, if stored) from a training checkpoint."""
    state = read_checkpoint(path)
    model.parameters().load_state(state)
    if "__band_mean__" in state:
        return BandStats(state["__band_mean__"].astype(np.float64), state["__band_std__"].astype(np.float64))
    return None


# --- evaluation ----------------------------------------------------------------

def predict(model: ResAttUNet, images: np.ndarray) -> np.ndarray:
    """Labels 1..K for a (B, bands, H, W) batch."""
    return predict_classes(model(Tensor(images)).data)


def evaluate_split(model: ResAttUNet, samples: list[PatchSample], batch_size: int = 8) -> tuple[MetricReport, np.ndarray]:
    if not samples:
        raise ValueError("evaluation split is empty")
    K = model.cfg.num_classes
    cm = np.zeros((K, K), dtype=np.int64)
    for images, masks, _ in iter_batches(samples, batch_size):
        cm += confusion_matrix(masks, predict(model, images), K)
    return metric_report(cm), cm


# --- orchestration -------------------------------------------------------------

def _rounded_stats(stats: BandStats) -> BandStats:
    # the checkpoint stores float32 stats; train with exactly those values
    return BandStats(stats.mean.astype(np.float32).astype(np.float64), stats.std.astype(np.float32).astype(np.float64))


def prepare_splits(manifest: Manifest, stats: BandStats | None = None) -> tuple[dict[str, list[PatchSample]], BandStats]:
    if stats is None:
        stats = manifest.stats if manifest.stats is not None else compute_band_stats(manifest, "train")
    stats = _rounded_stats(stats)
    splits = {}
    for name in ("train", "val", "test"):
        splits[name] = [standardize(s, stats.mean, stats.std) for s in load_split(manifest, name)]
    return splits, stats


def class_weights_for(manifest: Manifest, train: list[PatchSample], cfg: TrainConfig) -> losses.ClassWeights:
    if cfg.class_counts:
        return losses.class_weights_from_counts(cfg.class_counts, manifest.classes)
    counts, _ = label_distribution([s.mask for s in train], manifest.num_classes)
    return losses.class_weights_from_counts(counts, manifest.classes)


def fit(
    model: ResAttUNet,
    manifest: Manifest,
    cfg: TrainConfig,
    out_dir,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainLog:
    """Train ``model`` on the manifest's train split, writing logs and checkpoints.

    Writes ``train_log.csv`` (appended per epoch; wall time goes to
    ``train_timing.csv``), ``last.ckpt`` every epoch,
    ``best.ckpt`` on the best validation macro F1 (or every epoch without a
    validation split), and ``reports.json`` at the end. ``stop_after`` ends
    the run early after that many epochs in total.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits, stats = prepare_splits(manifest)
    train, val = splits["train"], splits["val"]
    if not train:
        raise ValueError("training split is empty")
    trainer = Trainer(model, cfg, class_weights_for(manifest, train, cfg))
    trainer.band_stats = stats
    (out / "class_weights.json").write_text(trainer.weights.to_json() + "\n")

    log_path, timing_path = out / "train_log.csv", out / "train_timing.csv"
    tlog = TrainLog()
    best = -1.0
    if resume is not None:
        trainer.checkpoint_load(resume)
        trainer.band_stats = stats
        if log_path.exists():
            rows = log_path.read_text().splitlines()[1:]
            secs = {}
            if timing_path.exists():
                secs = dict(r.split(",") for r in timing_path.read_text().splitlines()[1:])
            for row in rows[:trainer.epoch]:
                e, lr, tl, vl = row.split(",")
                sec = float(secs.get(e, "nan"))
                tlog.records.append(EpochRecord(int(e), float(lr), float(tl), float(vl), sec))
        best_path = out / "best.json"
        if best_path.exists():
            best = json.loads(best_path.read_text())["val_macro_f1"]
    log_path.write_text(tlog.to_csv())
    timing_path.write_text(tlog.timing_csv())

    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(trainer.epoch, end):
        t0 = time.perf_counter()
        train_loss = trainer.train_epoch(train, epoch)
        val_loss = trainer.loss_on(val) if val else float("nan")
        rec = EpochRecord(epoch, lr_schedule(cfg, epoch), train_loss, val_loss, time.perf_counter() - t0)
        tlog.records.append(rec)
        with open(log_path, "a") as f:
            f.write(rec.csv_row() + "\n")
        with open(timing_path, "a") as f:
            f.write(rec.timing_row() + "\n")
        log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, rec.lr, train_loss, val_loss)
        trainer.checkpoint_save(out / "last.ckpt")
        if val and (epoch + 1) % cfg.eval_every == 0:
            report, _ = evaluate_split(model, val, cfg.batch_size)
            if report.macro_f1 > best:
                best = report.macro_f1
                trainer.checkpoint_save(out / "best.ckpt")
                (out / "best.json").write_text(json.dumps({"epoch": epoch, "val_macro_f1": best}) + "\n")
        elif not val:
            trainer.checkpoint_save(out / "best.ckpt")

    if (out / "best.ckpt").exists():
        load_model_weights(model, out / "best.ckpt")
    for name, samples in splits.items():
        if samples:
            report, cm = evaluate_split(model, samples, cfg.batch_size)
            tlog.reports[name] = {"metrics": report.to_dict(), "confusion": cm.tolist()}
    (out / "reports.json").write_text(json.dumps(tlog.reports, indent=2) + "\n")
    return tlog
