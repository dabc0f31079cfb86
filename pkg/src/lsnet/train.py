"""SGD-with-momentum training loop: geometric learning-rate schedule,
random crop + left-right flip augmentation, per-epoch reporting.
"""

from dataclasses import dataclass, field

import numpy as np

from . import network, ops
from .errors import DataError, TrainingError, UsageError
from .volume import extract_slab

DEFAULT_CLASS_WEIGHTS = (0.2, 1.2, 2.2)


@dataclass
class TrainConfig:
    lr0: float = 0.001
    lr_gamma: float = 0.9
    epochs: int = 50
    weight_decay: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 4
    crop: int = 320
    flip_prob: float = 0.5
    seed: int = 0
    class_weights: tuple = DEFAULT_CLASS_WEIGHTS

    def __post_init__(self):
        if self.lr0 <= 0:
            raise UsageError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise UsageError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.crop % 16 != 0:
            raise UsageError(f"crop must be divisible by 16, got {self.crop}")
        if self.batch_size < 1 or self.epochs < 0:
            raise UsageError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    lr: float
    samples: int


@dataclass
class TrainingCase:
    """One volume with its labels and the slice indices eligible for
    sampling (all slices for the coarse stage, liver-region slices for the
    fine stage)."""

    image: "Volume"
    labels: "Volume"
    zs: tuple = field(default=None)

    def __post_init__(self):
        if self.zs is None:
            self.zs = tuple(range(self.image.dims[2]))
        self.zs = tuple(int(z) for z in self.zs)


def lr_at_epoch(cfg, epoch):
    """lr0 * gamma^epoch; epochs are 0-based and bounded by cfg.epochs."""
    if not 0 <= epoch < cfg.epochs:
        raise UsageError(f"epoch {epoch} outside [0,{cfg.epochs})")
    return cfg.lr0 * cfg.lr_gamma ** epoch


def sgd_step(params, lr, momentum, weight_decay):
    """Classical momentum update, then gradient reset.

    v <- momentum*v + lr*(grad + weight_decay*value); value <- value - v
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        g = p.grad + weight_decay * p.value
        p.momentum *= momentum
        p.momentum += lr * g
        p.value -= p.momentum
        p.grad[...] = 0


def sample_training_stack(volume, labels, rng, crop, k=5, flip_prob=0.5, z=None):
    """Random 2.5D training sample: crop x crop x k slab plus the center
    slice's label crop, with optional left-right mirroring of both.

    z defaults to a uniformly random slice; the epoch loop passes explicit
    slice indices so each eligible position is visited once per epoch.
    """
    nx, ny, nz = volume.dims
    if nx < crop or ny < crop:
        raise DataError(
            f"volume in-plane dims ({nx},{ny}) smaller than crop {crop}")
    if z is None:
        z = int(rng.integers(0, nz))
    oy = int(rng.integers(0, ny - crop + 1))
    ox = int(rng.integers(0, nx - crop + 1))
    flip = bool(rng.random() < flip_prob)

    slab = extract_slab(volume, z, k)
    x = slab.slices[:, :, oy:oy + crop, ox:ox + crop]
    target = labels.data[z, oy:oy + crop, ox:ox + crop]
    if flip:
        x = x[:, :, :, ::-1]
        target = target[:, ::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(target)


def train_model(net, cases, cfg, log=None):
    """Train over epochs x (samples/batch) steps of
    forward -> weighted CE -> backward -> SGD.

    One epoch visits every eligible (case, slice) position exactly once in
    a seeded random order.  Single-threaded and bit-deterministic for a
    fixed seed.  Returns the trained network and one report per epoch.
    """
    if not cases:
        raise DataError("training dataset is empty")
    nc = net.spec.num_classes
    if len(cfg.class_weights) != nc:
        raise UsageError(
            f"{len(cfg.class_weights)} class weights for {nc} classes")
    positions = [(ci, z) for ci, case in enumerate(cases) for z in case.zs]
    if not positions:
        raise DataError("no eligible slice positions in dataset")

    rng = np.random.default_rng(cfg.seed)
    reports = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(positions))
        loss_sum = 0.0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            xs, ys = [], []
            for bi in batch_idx:
                ci, z = positions[bi]
                case = cases[ci]
                x, y = sample_training_stack(
                    case.image, case.labels, rng, cfg.crop,
                    k=net.spec.in_slices, flip_prob=cfg.flip_prob, z=z)
                xs.append(x[0])
                ys.append(y)
            xb = np.stack(xs).astype(net.dtype)
            yb = np.stack(ys)
            logits, cache = network.forward(net, xb, "train")
            probs = ops.softmax_channels(logits)
            loss, grad = ops.weighted_ce_loss(probs, yb, cfg.class_weights)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"training diverged: loss {loss} at epoch {epoch}, "
                    f"step {start // cfg.batch_size}")
            network.backward(net, cache, grad)
            sgd_step(net.params, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += loss * len(batch_idx)
            seen += len(batch_idx)
        mean_loss = loss_sum / seen
        reports.append(EpochReport(epoch=epoch, mean_loss=mean_loss,
                                   lr=lr, samples=seen))
        if log is not None:
            print(f"epoch {epoch} lr {lr:.6g} mean_loss {mean_loss:.6g}",
                  file=log)
            log.flush()
    return net, reports
