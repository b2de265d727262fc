"""Known-class training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, DataError
from .losses import LossWeights, generate_permutation_set, total_loss
from .model import DEFAULT_TAU, DEFAULT_WIDTHS, ModelState, save_checkpoint
from .optim import NesterovSGD

log = logging.getLogger(__name__)

HEAD_PARAMS = ("perm_head", "rot_head")
METRIC_FIELDS = ("epoch", "lr", "loss_total", "loss_cls", "loss_split", "loss_rot",
                 "loss_er", "loss_sparse", "train_acc")


@dataclass
class TrainConfig:
    lr0: float = 0.01
    milestones: tuple = (25, 35)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    flip_prob: float = 0.5
    brightness_delta: float = 0.2
    widths: tuple = DEFAULT_WIDTHS
    grid: tuple = (2, 2)
    n_perms: int = 24
    perm_seed: int = 0
    tau: float = DEFAULT_TAU
    conv_init: str = "he"
    # the heads read unnormalized features whose norm drifts to ~0.2, so at
    # the backbone lr they barely move; they get their own lr and no decay
    head_lr_mult: float = 1000.0
    head_weight_decay: float = 0.0

    def validate(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and self.epochs and ms[-1] >= self.epochs:
            raise ValueError(f"milestones must be < epochs ({self.epochs}), got {ms}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.head_lr_mult <= 0:
            raise ValueError(f"head_lr_mult must be > 0, got {self.head_lr_mult}")
        if self.lr0 <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr0 > 0, batch_size >= 1 and epochs >= 0 required")
        if self.loss_weights.d_star > self.widths[-1]:
            raise ValueError(f"d_star={self.loss_weights.d_star} exceeds feature dim {self.widths[-1]}")

    def with_weights(self, **kw):
        return replace(self, loss_weights=replace(self.loss_weights, **kw))


def learning_rate(epoch, cfg: TrainConfig):
    """lr for 0-based ``epoch``: lr0 * drop^(number of milestones <= epoch)."""
    k = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr0 * cfg.lr_drop_factor ** k


def augment(x, rng, flip_prob=0.5, brightness_delta=0.2):
    """Random horizontal flip, then a uniform brightness shift, clamped to [0, 1]."""
    if flip_prob and rng.random() < flip_prob:
        x = x[:, ::-1, :]
    if brightness_delta:
        x = np.clip(x + rng.uniform(-brightness_delta, brightness_delta), 0.0, 1.0)
    return np.ascontiguousarray(x)


def example_rng(seed, epoch, index):
    # per-example stream: batch assembly is independent of visiting order
    return np.random.default_rng([seed, 2, epoch, index])


@dataclass
class TrainResult:
    model: ModelState
    history: list
    perms: object
    checkpoints: list = field(default_factory=list)


def train(data: Dataset, cfg: TrainConfig | None = None, run_dir=None, progress=None) -> TrainResult:
    cfg = cfg or TrainConfig()
    cfg.validate()
    if len(data) == 0:
        raise DataError("training set is empty")
    counts = data.class_counts()
    if np.any(counts == 0):
        empty = [data.class_names[i] for i in np.flatnonzero(counts == 0)]
        raise DataError(f"classes without training images: {empty}")

    h, v = cfg.grid
    w = cfg.loss_weights
    perms = generate_permutation_set(h * v, cfg.n_perms, cfg.perm_seed)
    model = ModelState.init(in_channels=data.images.shape[-1], n_classes=data.n_classes,
                            widths=tuple(cfg.widths), n_splits=h * v, n_perms=cfg.n_perms,
                            tau=cfg.tau, seed=cfg.seed, conv_init=cfg.conv_init)
    head = [k in HEAD_PARAMS for k in model.params]
    opt = NesterovSGD(model.trainable(), cfg.momentum,
                      [cfg.head_weight_decay if h else cfg.weight_decay for h in head],
                      [cfg.head_lr_mult if h else 1.0 for h in head])

    run_dir = Path(run_dir) if run_dir is not None else None
    ckpts = []
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpts.append(run_dir / "checkpoint_000.cfsl")
        save_checkpoint(model, ckpts[-1])
        metrics_fh = open(run_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_fh)
        writer.writerow(METRIC_FIELDS)

    history = []
    n = len(data)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = learning_rate(epoch, cfg)
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
            sums = dict.fromkeys(("total", "cls", "split", "rot", "er", "sparse"), 0.0)
            correct = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xs, pids, rots = [], [], []
                for i in idx:
                    r = example_rng(cfg.seed, epoch, int(i))
                    xs.append(augment(data.images[i], r, cfg.flip_prob, cfg.brightness_delta))
                    pids.append(r.integers(len(perms)))
                    rots.append(r.integers(4))
                x = np.stack(xs)
                y = data.labels[idx]
                opt.zero_grad()
                loss, parts = total_loss(x, y, model, w, perms, perm_ids=np.array(pids),
                                         rot_labels=np.array(rots), grid=cfg.grid)
                loss.backward()
                opt.step(lr)
                b = len(idx)
                sums["total"] += parts.total * b
                for k in ("cls", "split", "rot", "er", "sparse"):
                    sums[k] += parts.raw[k] * b
                correct += parts.cls_correct
            row = {"epoch": epoch + 1, "lr": lr,
                   **{f"loss_{k}": sums[k] / n for k in sums}, "train_acc": correct / n}
            history.append(row)
            log.info("epoch %d lr %.4g loss %.4f cls %.4f acc %.3f (%.1fs)", epoch + 1, lr,
                     row["loss_total"], row["loss_cls"], row["train_acc"], time.perf_counter() - t0)
            if progress is not None:
                progress(row)
            if run_dir is not None:
                writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                                 for k in METRIC_FIELDS])
                metrics_fh.flush()
                ckpts.append(run_dir / f"checkpoint_{epoch + 1:03d}.cfsl")
                save_checkpoint(model, ckpts[-1])
    finally:
        if run_dir is not None:
            metrics_fh.close()
    return TrainResult(model, history, perms, ckpts)
