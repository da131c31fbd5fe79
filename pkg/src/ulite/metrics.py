"""Binary segmentation metrics: confusion counts, Dice, IoU, evaluation."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError
from .tensor import Tensor

EPS = 1e-5


def binarize(pred: Tensor, threshold: float = 0.5) -> Tensor:
    """Threshold a soft mask to {0, 1}; the boundary value maps to 1."""
    data = (pred.data >= threshold).astype(pred.data.dtype)
    return Tensor(data)


def _as_binary(arr, name: str) -> np.ndarray:
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if not np.all((data == 0.0) | (data == 1.0)):
        raise InvalidInputError(f"{name} must be binary (0.0/1.0 only)")
    return data


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred, gt) -> ConfusionCounts:
    """Pixel confusion counts between two binary masks of equal dims."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"confusion: dims {p.shape} != {g.shape}")
    pb = p == 1.0
    gb = g == 1.0
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    tn = int(np.count_nonzero(~pb & ~gb))
    return ConfusionCounts(tp, fp, fn, tn)


def dice_iou(pred, gt, eps: float = EPS, symmetric: bool = True) -> tuple[float, float]:
    """Dice and IoU from binary masks.

    With symmetric=True, eps is added to numerator and denominator, so two
    empty masks score 1.0 on both metrics. symmetric=False restores the
    literal forms (eps in the denominator only), under which empty-vs-empty
    degenerates toward 0.
    """
    counts = confusion(pred, gt)
    return scores_from_counts(counts, eps=eps, symmetric=symmetric)


def scores_from_counts(counts: ConfusionCounts, eps: float = EPS,
                       symmetric: bool = True) -> tuple[float, float]:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    top = eps if symmetric else 0.0
    dice = (2.0 * tp + top) / (2.0 * tp + fp + fn + eps)
    iou = (tp + top) / (tp + fp + fn + eps)
    return float(dice), float(iou)


@dataclass
class SampleScore:
    sample_id: str
    dice: float
    iou: float


@dataclass
class EvalReport:
    scores: list[SampleScore]
    mean_dice: float
    mean_iou: float
    # pooled counts over the whole dataset, for the --global aggregation
    pooled: ConfusionCounts
    pooled_dice: float
    pooled_iou: float

    def rows(self) -> list[tuple[str, float, float]]:
        return [(s.sample_id, s.dice, s.iou) for s in self.scores]


def evaluate(model, pairs, threshold: float = 0.5, eps: float = EPS,
             symmetric: bool = True) -> EvalReport:
    """Score a model on (image, mask) pairs, one sample at a time.

    Runs the model in eval mode (running-stat BN) and restores the previous
    mode afterwards. Reports the per-sample mean of Dice/IoU plus globally
    pooled variants computed from summed confusion counts. Never mutates
    parameters or running stats.
    """
    previous = model.mode
    model.set_mode("eval")
    try:
        scores = []
        pooled = ConfusionCounts(0, 0, 0, 0)
        for pair in pairs:
            pred = binarize(model.forward(pair.image), threshold=threshold)
            counts = confusion(pred, pair.mask)
            pooled = pooled + counts
            dice, iou = scores_from_counts(counts, eps=eps, symmetric=symmetric)
            scores.append(SampleScore(pair.sample_id, dice, iou))
    finally:
        model.set_mode(previous)
    if not scores:
        raise InvalidInputError("evaluate: empty dataset")
    mean_dice = float(np.mean([s.dice for s in scores]))
    mean_iou = float(np.mean([s.iou for s in scores]))
    pooled_dice, pooled_iou = scores_from_counts(pooled, eps=eps, symmetric=symmetric)
    return EvalReport(scores, mean_dice, mean_iou, pooled, pooled_dice, pooled_iou)
