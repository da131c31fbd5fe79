"""Training: Dice loss, Adam, augmentation, and the epoch loop.

Everything here is deterministic given (dataset, configs, seed): sample
shuffling and augmentation draw from one counter-based stream in a fixed
order, the optimizer walks parameters in model definition order, and epoch
metrics are reduced in fixed sequence. The only nondeterministic output is
the wall-clock seconds column of the training log.
"""

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import SamplePair
from .errors import (InvalidInputError, NonFiniteError, ShapeError,
                     TrainingAborted)
from .metrics import confusion, evaluate, scores_from_counts
from .rng import Rng
from .tensor import Param, Tensor

LOG_COLUMNS = "epoch,loss,dice,iou,seconds"


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def dice_loss(pred: Tensor, gt: Tensor, smooth: float = 1e-5) -> Tensor:
    """Batch-global soft Dice loss, 1 - (2*sum(g*p) + s) / (sum(g) + sum(p) + s).

    gt must be strictly binary. Sums run in float64 and the result is cast
    back to the prediction dtype. The gradient with respect to prediction
    element i is (A - 2*g_i*B) / B**2 with A the smoothed numerator and B the
    smoothed denominator; a perfect prediction gives exactly 0 loss.
    """
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"dice_loss: dims {pred.data.shape} != {gt.data.shape}")
    gd = gt.data
    if not np.all((gd == 0.0) | (gd == 1.0)):
        raise InvalidInputError("dice_loss: gt must be binary (0.0/1.0 only)")
    a = 2.0 * np.sum(pred.data * gd, dtype=np.float64) + smooth
    b = (np.sum(gd, dtype=np.float64) + np.sum(pred.data, dtype=np.float64)
         + smooth)
    loss = 1.0 - a / b

    def backward(g):
        coeff = float(g.reshape(-1)[0])
        grad = coeff * (a - 2.0 * gd.astype(np.float64) * b) / (b * b)
        T.accumulate(pred, grad.astype(pred.data.dtype))

    out = np.full((1, 1, 1, 1), loss, dtype=pred.data.dtype)
    return T.result(out, (pred,), backward, "dice_loss")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam; eps sits outside the square root.

    update = lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

    so the first step with gradient g moves each weight by lr * g/(|g|+eps).
    State arrays live in the parameter dtype and update order follows the
    parameter list order exactly.
    """

    def __init__(self, params: list[Param], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            p.value[...] = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    rotate: bool = True
    max_angle: float = 30.0
    hflip: bool = True
    vflip: bool = True


def rotate_nearest(arr: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate the last two axes about the image center, nearest sampling.

    Positive angles turn counter-clockwise (angle 90 on a square array equals
    np.rot90). Destination pixels map back through the inverse rotation and
    take floor(coord + 0.5); sources outside the frame fill with zero.
    """
    h, w = arr.shape[-2:]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rc, cc = (h - 1) / 2.0, (w - 1) / 2.0
    grid = np.mgrid[0:h, 0:w].astype(np.float64)
    rows, cols = grid[0] - rc, grid[1] - cc
    src_r = rc + cos_t * rows + sin_t * cols
    src_c = cc - sin_t * rows + cos_t * cols
    sr = np.floor(src_r + 0.5).astype(np.int64)
    sc = np.floor(src_c + 0.5).astype(np.int64)
    valid = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    gathered = arr[..., np.clip(sr, 0, h - 1), np.clip(sc, 0, w - 1)]
    return np.where(valid, gathered, 0.0).astype(arr.dtype, copy=False)


def augment(pair: SamplePair, cfg: AugmentConfig, rng: Rng) -> SamplePair:
    """Random rotation then horizontal/vertical flips, identical for image
    and mask. Draw order is fixed: angle (if rotating), hflip coin, vflip
    coin; binarity of the mask is preserved by construction."""
    image = pair.image.data[0]
    mask = pair.mask.data[0, 0]
    if cfg.rotate:
        angle = -cfg.max_angle + 2.0 * cfg.max_angle * rng.uniform(1)[0]
        image = rotate_nearest(image, angle)
        mask = rotate_nearest(mask, angle)
    if cfg.hflip and rng.uniform(1)[0] < 0.5:
        image = image[..., ::-1]
        mask = mask[..., ::-1]
    if cfg.vflip and rng.uniform(1)[0] < 0.5:
        image = image[..., ::-1, :]
        mask = mask[..., ::-1, :]
    return SamplePair(pair.sample_id,
                      Tensor(np.ascontiguousarray(image)[None]),
                      Tensor(np.ascontiguousarray(mask)[None, None]))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    val_split: float = 0.1
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    stop_at_dice: float | None = None
    threshold: float = 0.5
    log_path: str | None = None
    checkpoint_path: str | None = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.val_split < 1.0):
            raise ValueError(f"val_split must be in [0, 1), got {self.val_split}")
        return self


@dataclass
class EpochStats:
    epoch: int
    loss: float
    dice: float
    iou: float
    seconds: float
    val_dice: float | None = None


@dataclass
class TrainResult:
    epochs: list[EpochStats]
    final_train_dice: float
    stopped_early: bool
    best_val_dice: float | None
    best_epoch: int | None
    checkpoint_path: str | None
    best_checkpoint_path: str | None


def _log_open(path: str):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    fh = open(path, "a", encoding="utf-8")
    if new:
        fh.write(LOG_COLUMNS + "\n")
        fh.flush()
    return fh


def train_loop(model, pairs: list[SamplePair], cfg: TrainConfig) -> TrainResult:
    """Train on leading samples, validate on the trailing val_split fraction.

    Per epoch: shuffle, augment, batched forward/backward, Adam step; epoch
    Dice/IoU are per-sample means over training batches. Writes an append-only
    CSV log, a checkpoint at the end, and (when a validation set exists) a
    checkpoint at the best validation Dice. Any non-finite value aborts with
    a diagnostic naming the producing op. stop_at_dice halts once the epoch's
    training Dice reaches the threshold.
    """
    cfg.validate()
    if not pairs:
        raise ValueError("train_loop: empty dataset")
    n_val = int(math.floor(cfg.val_split * len(pairs)))
    train_pairs = pairs[:len(pairs) - n_val]
    val_pairs = pairs[len(pairs) - n_val:] if n_val else []
    if not train_pairs:
        raise ValueError("train_loop: val_split leaves no training samples")

    rng = Rng(cfg.seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    log = _log_open(cfg.log_path) if cfg.log_path else None
    best_path = cfg.checkpoint_path + ".best" if cfg.checkpoint_path else None

    stats: list[EpochStats] = []
    best_val = None
    best_epoch = None
    stopped = False
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            model.set_mode("train")
            order = rng.permutation(len(train_pairs))
            loss_sum = 0.0
            dice_sum = 0.0
            iou_sum = 0.0
            seen = 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start:start + cfg.batch_size]
                batch = [train_pairs[i] for i in chunk]
                if cfg.augment is not None:
                    batch = [augment(p, cfg.augment, rng) for p in batch]
                x = Tensor(np.concatenate([p.image.data for p in batch]))
                gt = Tensor(np.concatenate([p.mask.data for p in batch]))
                model.zero_grad()
                try:
                    pred = model.forward(x)
                    loss = dice_loss(pred, gt)
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingAborted(
                        f"epoch {epoch}, batch {start // cfg.batch_size + 1}: {exc}"
                    ) from exc
                optimizer.step()
                loss_sum += loss.item() * len(batch)
                hard = (pred.data >= cfg.threshold).astype(pred.data.dtype)
                for i in range(len(batch)):
                    counts = confusion(hard[i:i + 1], gt.data[i:i + 1])
                    d, j = scores_from_counts(counts)
                    dice_sum += d
                    iou_sum += j
                seen += len(batch)

            val_dice = None
            if val_pairs:
                val_dice = evaluate(model, val_pairs, threshold=cfg.threshold).mean_dice
                if best_val is None or val_dice > best_val:
                    best_val = val_dice
                    best_epoch = epoch
                    if best_path:
                        save_checkpoint(model, best_path, optimizer)

            row = EpochStats(epoch, loss_sum / seen, dice_sum / seen,
                             iou_sum / seen, time.perf_counter() - started,
                             val_dice)
            stats.append(row)
            if log:
                log.write(f"{row.epoch},{row.loss:.6f},{row.dice:.6f},"
                          f"{row.iou:.6f},{row.seconds:.3f}\n")
                log.flush()
            if cfg.stop_at_dice is not None and row.dice >= cfg.stop_at_dice:
                stopped = True
                break
    finally:
        if log:
            log.close()

    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path, optimizer)
    return TrainResult(stats, stats[-1].dice, stopped, best_val, best_epoch,
                       cfg.checkpoint_path, best_path if best_val is not None else None)
