"""Nesterov SGD training, evaluation, and score-level stream fusion."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensorkit as tk
from .checkpoint import Checkpoint
from .datapipe import (
    DEFAULT_FAST_STRIDE,
    DEFAULT_SLOW_STRIDE,
    STREAMS,
    SkeletonSequence,
    crop_frames,
    resample_frames,
    stream_array,
)
from .network import DSTANet, NetworkConfig

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "lr", "loss", "train_acc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    base_lr: float = 0.1
    lr_drop_epochs: tuple = (60, 90)
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    stream: str = "st"
    fast_stride: int = DEFAULT_FAST_STRIDE
    slow_stride: int = DEFAULT_SLOW_STRIDE
    sample_frames: int = 150
    crop_frames: int = 128

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs: must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be positive")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("lr_drop_epochs: must be strictly increasing")
        if drops and (drops[0] < 1 or drops[-1] >= self.epochs):
            raise ValueError("lr_drop_epochs: must lie inside [1, epochs)")
        if self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor: must exceed 1")
        if self.stream not in STREAMS:
            raise ValueError(f"stream: must be one of {', '.join(STREAMS)}")
        if self.crop_frames > self.sample_frames:
            raise ValueError("crop_frames: cannot exceed sample_frames")
        if not 1 <= self.fast_stride < self.crop_frames or not 1 <= self.slow_stride < self.crop_frames:
            raise ValueError("fast_stride/slow_stride: must lie in [1, crop_frames)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(data) - known)
        if bad:
            raise ValueError(f"train.{bad[0]}: unknown field")
        return cls(**data)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: ``base_lr / factor ** (drops passed)``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    return cfg.base_lr / cfg.lr_drop_factor ** drops


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_acc: float

    def line(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.loss!r},{self.train_acc!r}"


def format_log(entries) -> str:
    return ",".join(LOG_HEADER) + "\n" + "".join(e.line() + "\n" for e in entries)


def parse_log(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != LOG_HEADER:
        raise ValueError("epoch log: missing header")
    return [EpochLog(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


@dataclass
class ScoreTable:
    ids: list
    probs: np.ndarray  # n x K
    labels: np.ndarray
    stream: str = ""

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("score table: duplicate sample ids")

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predictions == self.labels)) if len(self.ids) else 0.0

    def per_class_accuracy(self, num_classes: Optional[int] = None) -> np.ndarray:
        k = num_classes or self.probs.shape[1]
        acc = np.full(k, np.nan)
        pred = self.predictions
        for c in range(k):
            mask = self.labels == c
            if mask.any():
                acc[c] = float(np.mean(pred[mask] == c))
        return acc

    def sorted(self) -> "ScoreTable":
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        return ScoreTable([self.ids[i] for i in order], self.probs[order],
                          self.labels[order], self.stream)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        k = self.probs.shape[1]
        writer.writerow(["id", "label"] + [f"p{i}" for i in range(k)])
        for sid, label, row in zip(self.ids, self.labels, self.probs):
            writer.writerow([sid, int(label)] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, stream: str = "") -> "ScoreTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:2] != ["id", "label"]:
            raise ValueError("score table: expected header id,label,p0,...")
        ids = [r[0] for r in rows[1:]]
        labels = [int(r[1]) for r in rows[1:]]
        probs = np.array([[float(v) for v in r[2:]] for r in rows[1:]]).reshape(
            len(ids), len(rows[0]) - 2)
        return cls(ids, probs, labels, stream)

    @classmethod
    def load(cls, path) -> "ScoreTable":
        return cls.from_csv(Path(path).read_text(), stream=Path(path).stem)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# batches


def prepare_sample(seq: SkeletonSequence, cfg: TrainConfig, train: bool,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Resample, crop, then decouple one sequence into an ``N x T x C`` stream.

    Training draws random frames and a random window; evaluation samples
    uniformly and crops the center.
    """
    if train:
        seq = resample_frames(seq, cfg.sample_frames, "random", rng)
        seq = crop_frames(seq, cfg.crop_frames, "random", rng)
    else:
        seq = resample_frames(seq, cfg.sample_frames, "uniform")
        seq = crop_frames(seq, cfg.crop_frames, "center")
    return stream_array(seq, cfg.stream, cfg.fast_stride, cfg.slow_stride)


def _run_epochs(net: DSTANet, n: int, labels: np.ndarray, cfg: TrainConfig,
                make_batch: Callable, eval_x: np.ndarray,
                on_epoch: Optional[Callable] = None) -> list:
    # the logged accuracy is measured after the epoch's last step on the
    # deterministic eval view of the training set, so it matches evaluate()
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = make_batch(idx, rng)
            y = labels[idx]
            try:
                with tk.Tape() as tape:
                    logits = net.forward(x)
                    loss = tk.cross_entropy(logits, y)
                tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"non-finite values at epoch {epoch}, batch starting {start} "
                    f"(lr={lr}): {exc}") from exc
            tk.sgd_nesterov_step(params, lr, cfg.momentum, cfg.weight_decay)
            total_loss += loss.item() * len(idx)
        try:
            correct = int(np.sum(net.predict_proba(eval_x).argmax(axis=1) == labels))
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite values at epoch {epoch} (lr={lr}): {exc}") from exc
        entry = EpochLog(epoch, lr, total_loss / n, correct / n)
        history.append(entry)
        log.info("epoch %d lr %g loss %.6f acc %.4f", epoch, lr, entry.loss, entry.train_acc)
        if on_epoch is not None:
            on_epoch(entry)
    return history


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)


def make_checkpoint(net: DSTANet, cfg: Optional[TrainConfig] = None) -> Checkpoint:
    config = {"network": net.config.to_dict(), "seed": net.seed}
    if cfg is not None:
        config["train"] = cfg.to_dict()
    return Checkpoint(net.state_dict(), config)


def net_from_checkpoint(ckpt: Checkpoint) -> tuple:
    """Rebuild ``(net, train_config or None)`` from a checkpoint."""
    config = NetworkConfig.from_dict(ckpt.config["network"])
    net = DSTANet(config, ckpt.config.get("seed", 0))
    net.load_state_dict(ckpt.params)
    train = ckpt.config.get("train")
    return net, (TrainConfig.from_dict(train) if train else None)


def train(net: DSTANet, sequences, cfg: TrainConfig,
          on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train ``net`` in place on ``sequences`` using the configured stream."""
    cfg.validate()
    sequences = list(sequences)
    if not sequences:
        raise ValueError("training set is empty")
    if cfg.crop_frames != net.config.num_frames:
        raise ValueError(f"crop_frames {cfg.crop_frames} does not match network "
                         f"num_frames {net.config.num_frames}")
    labels = np.array([s.label for s in sequences], dtype=np.int64)

    def make_batch(idx, rng):
        return np.stack([prepare_sample(sequences[i], cfg, True, rng) for i in idx])

    eval_x = np.stack([prepare_sample(s, cfg, False) for s in sequences])
    with threadpool_limits(limits=1, user_api="blas"):
        history = _run_epochs(net, len(sequences), labels, cfg, make_batch, eval_x, on_epoch)
    return TrainResult(make_checkpoint(net, cfg), history)


def fit_arrays(net: DSTANet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               on_epoch: Optional[Callable] = None) -> list:
    """Train on ready-made ``B x N x T x C`` inputs (no resampling or cropping)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    with threadpool_limits(limits=1, user_api="blas"):
        return _run_epochs(net, len(x), y, cfg, lambda idx, rng: x[idx], x, on_epoch)


@dataclass
class EvalResult:
    accuracy: float
    table: ScoreTable


def evaluate(net: DSTANet, sequences, cfg: TrainConfig, batch_size: int = 64) -> EvalResult:
    """Top-1 accuracy and probability table with uniform sampling, center crop."""
    sequences = list(sequences)
    ids = [s.id for s in sequences]
    if len(set(ids)) != len(ids):
        raise ValueError("evaluation set has colliding sample ids")
    x = np.stack([prepare_sample(s, cfg, False) for s in sequences]) if sequences else \
        np.zeros((0, net.config.num_joints, net.config.num_frames, net.config.in_channels))
    with threadpool_limits(limits=1, user_api="blas"):
        probs = net.predict_proba(x, batch_size)
    table = ScoreTable(ids, probs, [s.label for s in sequences], cfg.stream)
    return EvalResult(table.accuracy, table)


def fuse_scores(tables) -> EvalResult:
    """Average per-stream probability vectors sample by sample."""
    tables = list(tables)
    if not tables:
        raise ValueError("nothing to fuse")
    ref = tables[0].sorted()
    stacked = [ref.probs]
    for t in tables[1:]:
        t = t.sorted()
        if t.ids != ref.ids:
            raise ValueError("score tables cover different sample ids")
        if t.probs.shape != ref.probs.shape:
            raise ValueError("score tables disagree on the number of classes")
        if not np.array_equal(t.labels, ref.labels):
            raise ValueError("score tables disagree on labels")
        stacked.append(t.probs)
    # sorting per entry makes the sum independent of table order
    mean = np.sort(np.stack(stacked), axis=0).sum(axis=0) / len(stacked)
    fused = ScoreTable(ref.ids, mean, ref.labels, "fused")
    return EvalResult(fused.accuracy, fused)
