"""Losses, SGD, two-stage training schedules and evaluation.

Classification: stage 1 trains only the head (everything else frozen), stage
2 unfreezes the whole network at a lower learning rate. Segmentation: the
encoder is optionally loaded from a classifier checkpoint, stage 1 trains
the decoder and head with the encoder frozen, stage 2 trains everything.
The best epoch by validation headline metric (sample-averaged F1 or pixel
accuracy) is kept.
"""

from __future__ import annotations

import csv
import json
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from . import metrics
from .errors import NetworkError, TrainError
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import sigmoid
from .nn.network import EncoderSpec, Network, build_network
from .raster import NODATA
from .taxonomy import Taxonomy

TASKS = ("classify", "segment")
DEFAULT_EPOCHS = {"classify": (10, 10), "segment": (5, 5)}
DEFAULT_LEARNING_RATE = {"classify": 0.3, "segment": 0.05}


# --- losses ----------------------------------------------------------------

def _bce_elements(logits, targets):
    z = np.asarray(logits)
    t = np.asarray(targets, dtype=z.dtype)
    if z.shape != t.shape:
        raise TrainError(f"logits {z.shape} and targets {t.shape} differ")
    if not np.isin(t, (0, 1)).all():
        raise TrainError("multi-label targets must be 0 or 1")
    return np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))), z, t


def bce_multilabel_loss(logits, targets):
    """Mean binary cross-entropy over all B*K entries and its logit gradient."""
    elems, z, t = _bce_elements(logits, targets)
    grad = (sigmoid(z) - t) / z.size
    return float(elems.mean()), grad.astype(z.dtype)


def bce_per_sample(logits, targets) -> np.ndarray:
    elems, _, _ = _bce_elements(logits, targets)
    return elems.mean(axis=1)


def _pixel_ce_parts(logits, masks):
    z = np.asarray(logits)
    m = np.asarray(masks)
    if z.ndim != 4 or m.shape != (z.shape[0], *z.shape[2:]):
        raise TrainError(f"logits {z.shape} and masks {m.shape} do not match")
    k = z.shape[1]
    valid = m != NODATA
    if (m[valid] >= k).any():
        raise TrainError(f"mask values must be < {k} or nodata")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    sum_e = e.sum(axis=1, keepdims=True)
    lse = (np.log(sum_e) + zmax)[:, 0]
    target = np.where(valid, m, 0).astype(np.int64)
    z_true = np.take_along_axis(z, target[:, None], axis=1)[:, 0]
    return z, e / sum_e, valid, target, lse - z_true


def pixel_crossentropy_loss(logits, masks):
    """Mean negative log softmax probability of the true class over labelled pixels."""
    z, prob, valid, target, nll = _pixel_ce_parts(logits, masks)
    n = int(valid.sum())
    if n == 0:
        raise TrainError("all pixels are nodata")
    grad = prob.copy()
    np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], 1) - 1, 1)
    grad *= valid[:, None] / n
    return float(nll[valid].sum() / n), grad.astype(z.dtype)


def pixel_ce_per_sample(logits, masks) -> np.ndarray:
    _, _, valid, _, nll = _pixel_ce_parts(logits, masks)
    counts = valid.sum(axis=(1, 2))
    total = np.where(valid, nll, 0).sum(axis=(1, 2))
    return np.divide(total, counts, out=np.zeros(len(counts)), where=counts > 0)


# --- optimisation ----------------------------------------------------------

class SGD:
    """SGD with momentum over the unfrozen parameters of a network."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip_norm: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.clip_norm = lr, momentum, clip_norm
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params if not p.frozen)))

    def step(self):
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p in self.params:
            if p.frozen:
                continue
            v = self.velocity[p.name]
            v *= self.momentum
            v -= (self.lr * scale) * p.grad
            p.value += v


@dataclass
class TrainConfig:
    task: str = "classify"
    level: int = 3
    stage1_epochs: int | None = None
    stage2_epochs: int | None = None
    batch_size: int = 4
    learning_rate: float | None = None
    stage2_lr_factor: float = 0.5
    momentum: float = 0.9
    clip_norm: float = 1.0
    seed: int = 42
    augment: bool = True
    threshold: float = 0.5
    channels: tuple = (8, 16, 32, 64)
    checkpoint: str | None = None
    encoder_from: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise TrainError(f"task must be one of {TASKS}, got {self.task!r}")
        s1, s2 = DEFAULT_EPOCHS[self.task]
        if self.stage1_epochs is None:
            self.stage1_epochs = s1
        if self.stage2_epochs is None:
            self.stage2_epochs = s2
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LEARNING_RATE[self.task]
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        if self.level not in (1, 2, 3):
            raise TrainError(f"level must be 1, 2 or 3, got {self.level}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise TrainError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.stage2_lr_factor <= 0:
            raise TrainError("learning rates must be positive")
        if self.clip_norm < 0:
            raise TrainError("clip_norm must be >= 0 (0 disables clipping)")
        if not 0 <= self.momentum < 1:
            raise TrainError("momentum must be in [0, 1)")
        if not 0 <= self.threshold <= 1:
            raise TrainError("threshold must be in [0, 1]")
        if len(self.channels) != 4:
            raise TrainError("channels needs four values")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines (``#`` comments) into typed TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TrainError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise TrainError(f"config line {lineno}: unknown key {key!r}")
        out[key] = coerce_config_value(key, value)
    return out


def coerce_config_value(key: str, value: str):
    if key in ("task", "checkpoint", "encoder_from"):
        return value or None
    if key in ("level", "stage1_epochs", "stage2_epochs", "batch_size", "seed"):
        return int(value)
    if key in ("learning_rate", "stage2_lr_factor", "momentum", "threshold", "clip_norm"):
        return float(value)
    if key == "augment":
        lowered = value.lower()
        if lowered not in ("1", "0", "true", "false", "on", "off", "yes", "no"):
            raise TrainError(f"augment must be a boolean, got {value!r}")
        return lowered in ("1", "true", "on", "yes")
    if key == "channels":
        return tuple(int(c) for c in value.replace(";", ",").split(","))
    raise TrainError(f"unknown config key {key!r}")


# --- data ------------------------------------------------------------------

@dataclass
class ArrayData:
    ids: list[str]
    images: np.ndarray          # [N, 3, H, W] float32
    masks: np.ndarray           # [N, H, W] uint8 at the training level
    targets: np.ndarray         # [N, K] 0/1 float32 from the stored labels
    truths: list[frozenset] = field(default_factory=list)


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 HWC -> float32 CHW scaled to [-1, 1]."""
    return (np.asarray(image, np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def load_arrays(samples: Sequence[ds.Sample], taxonomy: Taxonomy, level: int) -> ArrayData:
    if not samples:
        raise TrainError("empty split")
    k = taxonomy.num_classes(level)
    k3 = taxonomy.num_classes(3)
    images, masks = [], []
    targets = np.zeros((len(samples), k), np.float32)
    truths = []
    for i, s in enumerate(samples):
        pair = ds.load_pair(s, k3)
        images.append(image_to_input(pair.image))
        masks.append(ds.lift_mask(pair.mask, taxonomy, 3, level))
        labels = s.labels[level].indices
        targets[i, sorted(labels)] = 1.0
        truths.append(frozenset(labels))
    return ArrayData([s.patch_id for s in samples], np.stack(images), np.stack(masks),
                     targets, truths)


def _augment_batch(images, masks, rng):
    ops = (None,) + ds.AUGMENT_OPS
    out_i, out_m = images.copy(), masks.copy()
    for j, choice in enumerate(rng.integers(len(ops), size=len(images))):
        op = ops[choice]
        if op is not None:
            out_i[j] = ds.apply_op(images[j], op, axes=(1, 2))
            out_m[j] = ds.apply_op(masks[j], op, axes=(0, 1))
    return out_i, out_m


# --- training --------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    stage: int
    train_loss: float
    val_loss: float
    metric: float
    wall_time: float
    class_iou: list = field(default_factory=list)


@dataclass
class TrainLog:
    rows: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "stage", "train_loss", "val_loss", "metric",
                             "wall_time", "class_iou"])
            for r in self.rows:
                iou = ";".join("" if np.isnan(v) else f"{v:.6f}" for v in r.class_iou)
                writer.writerow([r.epoch, r.stage, f"{r.train_loss:.8f}", f"{r.val_loss:.8f}",
                                 f"{r.metric:.8f}", f"{r.wall_time:.3f}", iou])
        return path


def forward_batches(net, images, batch_size):
    """Yield ``(start, logits)`` over consecutive slices of ``images``."""
    for start in range(0, len(images), batch_size):
        yield start, net.forward(images[start:start + batch_size])


def _loss_fn(task):
    return bce_multilabel_loss if task == "classify" else pixel_crossentropy_loss


def _validate(net, config, val: ArrayData):
    """Validation loss, headline metric and per-class IoU (segmentation only)."""
    losses, weights = [], []
    if config.task == "classify":
        preds = []
        for start, logits in forward_batches(net, val.images, config.batch_size):
            t = val.targets[start:start + len(logits)]
            losses.append(bce_multilabel_loss(logits, t)[0])
            weights.append(len(logits))
            preds += predicted_sets(logits, config.threshold)
        batch = metrics.MultiLabelBatch(val.truths, preds, net.num_classes)
        return float(np.average(losses, weights=weights)), metrics.overall_f1(batch), []
    cm = metrics.ConfusionMatrix(np.zeros((net.num_classes,) * 2, np.int64))
    for start, logits in forward_batches(net, val.images, config.batch_size):
        m = val.masks[start:start + len(logits)]
        n = int((m != NODATA).sum())
        if n:
            losses.append(pixel_crossentropy_loss(logits, m)[0])
            weights.append(n)
        cm = cm + metrics.confusion(m, argmax_masks(logits), net.num_classes)
    return float(np.average(losses, weights=weights)), cm.accuracy(), cm.jaccard().tolist()


def _run_stages(net: Network, config: TrainConfig, train: ArrayData, val: ArrayData,
                freeze_part: str) -> TrainLog:
    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    best_state = None
    loss_fn = _loss_fn(config.task)
    epoch = 0
    schedule = [(1, config.stage1_epochs, config.learning_rate),
                (2, config.stage2_epochs, config.learning_rate * config.stage2_lr_factor)]
    for stage, n_epochs, lr in schedule:
        if n_epochs == 0:
            continue
        net.unfreeze()
        if stage == 1:
            net.freeze(freeze_part)
        opt = SGD(net.trainable(), lr, config.momentum, config.clip_norm)
        for _ in range(n_epochs):
            epoch += 1
            t0 = time.perf_counter()
            order = rng.permutation(len(train.ids))
            total, count = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                x, masks = train.images[idx], train.masks[idx]
                if config.augment:
                    x, masks = _augment_batch(x, masks, rng)
                target = train.targets[idx] if config.task == "classify" else masks
                net.zero_grad()
                logits = net.forward(x)
                loss, grad = loss_fn(logits, target)
                net.backward(grad)
                opt.step()
                total += loss * len(idx)
                count += len(idx)
            val_loss, metric, iou = _validate(net, config, val)
            log.rows.append(EpochRecord(epoch, stage, total / count, val_loss, metric,
                                        time.perf_counter() - t0, iou))
            if log.best_metric is None or metric > log.best_metric:
                log.best_metric, log.best_epoch = metric, epoch
                best_state = net.state()
                if config.checkpoint:
                    save_checkpoint(config.checkpoint, best_state)
    net.unfreeze()
    if best_state is not None:
        net.load_state(best_state)
    return log


def _splits(manifest: ds.Manifest, taxonomy, level):
    train, val = manifest.split("train"), manifest.split("val")
    if not train or not val:
        raise TrainError("manifest needs non-empty train and val splits")
    return load_arrays(train, taxonomy, level), load_arrays(val, taxonomy, level)


def train_classifier(config: TrainConfig, manifest: ds.Manifest, taxonomy: Taxonomy,
                     data: tuple[ArrayData, ArrayData] | None = None):
    """Two-stage multi-label classifier training; returns ``(net, log)``."""
    if config.task != "classify":
        raise TrainError("train_classifier needs task=classify")
    train, val = data or _splits(manifest, taxonomy, config.level)
    net = build_network("classify", taxonomy.num_classes(config.level),
                        EncoderSpec(config.channels, seed=config.seed))
    return net, _run_stages(net, config, train, val, "all_but_head")


def train_segmenter(config: TrainConfig, manifest: ds.Manifest, taxonomy: Taxonomy,
                    encoder_checkpoint=None, data: tuple[ArrayData, ArrayData] | None = None):
    """Two-stage U-Net training, optionally from a classifier encoder; returns ``(net, log)``."""
    if config.task != "segment":
        raise TrainError("train_segmenter needs task=segment")
    train, val = data or _splits(manifest, taxonomy, config.level)
    net = build_network("segment", taxonomy.num_classes(config.level),
                        EncoderSpec(config.channels, seed=config.seed))
    encoder_checkpoint = encoder_checkpoint or config.encoder_from
    if encoder_checkpoint is not None:
        transfer_encoder(net, encoder_checkpoint)
    return net, _run_stages(net, config, train, val, "encoder")


def transfer_encoder(net: Network, source) -> list[str]:
    """Load ``encoder.*`` parameters from a checkpoint path, state dict or network."""
    if isinstance(source, Network):
        state = source.state()
    elif isinstance(source, dict):
        state = source
    else:
        state = load_checkpoint(source)
    try:
        return net.load_state(state, prefix="encoder.", strict=True)
    except NetworkError as exc:
        raise TrainError(f"encoder checkpoint does not match the U-Net: {exc.args[0]}") from None


# --- evaluation ------------------------------------------------------------

def predicted_sets(logits, threshold: float = 0.5) -> list[frozenset]:
    """Labels whose sigmoid probability strictly exceeds ``threshold``."""
    probs = sigmoid(np.asarray(logits, np.float64))
    return [frozenset(np.flatnonzero(row > threshold).tolist()) for row in probs]


def argmax_masks(logits) -> np.ndarray:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return np.asarray(logits).argmax(axis=1).astype(np.uint8)


@dataclass
class ClassificationEval:
    report: metrics.ClassReport
    batch: metrics.MultiLabelBatch
    ids: list[str]
    probabilities: np.ndarray


@dataclass
class SegmentationEval:
    report: metrics.SegmentationReport
    ids: list[str]


def evaluate(net, samples: Sequence[ds.Sample], level: int, taxonomy: Taxonomy,
             threshold: float = 0.5, batch_size: int = 8, data: ArrayData | None = None):
    """Score ``net`` on ``samples`` with the full metric suite for its task."""
    data = data or load_arrays(samples, taxonomy, level)
    k = taxonomy.num_classes(level)
    if net.task == "classify":
        probs, preds = [], []
        for _, logits in forward_batches(net, data.images, batch_size):
            probs.append(sigmoid(np.asarray(logits, np.float64)))
            preds += predicted_sets(logits, threshold)
        batch = metrics.MultiLabelBatch(data.truths, preds, k)
        return ClassificationEval(metrics.class_report(batch), batch, data.ids,
                                  np.concatenate(probs))
    cm = metrics.ConfusionMatrix(np.zeros((k, k), np.int64))
    for start, logits in forward_batches(net, data.images, batch_size):
        cm = cm + metrics.confusion(data.masks[start:start + len(logits)],
                                    argmax_masks(logits), k)
    return SegmentationEval(metrics.segmentation_report(cm), data.ids)


# --- run metadata ----------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run(out_dir, config: TrainConfig, log: TrainLog, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.write_csv(out_dir / "log.csv")
    meta = {"config": config.to_dict(), "seed": config.seed, "git": git_describe(),
            "summary": {"best_epoch": log.best_epoch, "best_metric": log.best_metric,
                        "epochs": len(log.rows)}}
    if extra:
        meta.update(extra)
    path = out_dir / "run.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path
