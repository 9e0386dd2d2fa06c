"""DETR matching cost and the set-prediction detection loss.

Matching uses the cost form (``-p`` for classification), the reported loss
uses the training form (negative log-probability). Background is the last
probability slot. Gradients treat the assignment as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import _kernels
from .assignment import BACKGROUND, AssignmentResult, hungarian
from .geometry import cxcywh_to_xyxy, giou, l1_box

EPS_PROB = 1e-12


@dataclass
class PredictionSet:
    """N predictions: class probabilities over C classes + background, boxes."""

    probs: np.ndarray  # (N, C+1)
    boxes: np.ndarray  # (N, 4) cx, cy, w, h
    embed: np.ndarray | None = None  # (N, d) query that produced each row
    group: str = "default"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.probs.ndim != 2 or self.boxes.shape != (self.probs.shape[0], 4):
            raise ValueError("probs must be (N, C+1) and boxes (N, 4)")

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def background(self) -> int:
        return self.probs.shape[1] - 1


@dataclass
class GroundTruth:
    class_id: int
    box: tuple[float, float, float, float]


@dataclass
class Targets:
    """Foreground ground truth of one image; background padding is implicit."""

    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.labels.shape[0] != self.boxes.shape[0]:
            raise ValueError("labels and boxes disagree in length")

    @classmethod
    def from_list(cls, gts: Iterable[GroundTruth]) -> "Targets":
        gts = list(gts)
        return cls([g.class_id for g in gts], [g.box for g in gts])

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class CostWeights:
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    cls_mode: str = "prob"  # or "focal"

    def __post_init__(self):
        if min(self.w_cls, self.w_l1, self.w_giou) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.w_cls == self.w_l1 == self.w_giou == 0:
            raise ValueError("cost weights cannot all be zero")
        if self.cls_mode not in ("prob", "focal"):
            raise ValueError(f"unknown cls_mode {self.cls_mode!r}")


@dataclass
class PredGrad:
    probs: np.ndarray
    boxes: np.ndarray

    @classmethod
    def zeros_like(cls, preds: PredictionSet) -> "PredGrad":
        return cls(np.zeros_like(preds.probs), np.zeros_like(preds.boxes))


def _focal(p: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    p = np.clip(p, EPS_PROB, 1 - EPS_PROB)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    neg = (1 - alpha) * p**gamma * -np.log(1 - p)
    return pos - neg


def cls_cost(probs, target_class: int, mode: str = "prob") -> float:
    """Matching-form classification cost of one prediction."""
    p = float(np.asarray(probs, dtype=np.float64)[target_class])
    return -p if mode == "prob" else float(_focal(np.array(p)))


def cls_cost_matrix(probs: np.ndarray, classes: np.ndarray, mode: str = "prob") -> np.ndarray:
    p = probs[:, classes]
    return -p if mode == "prob" else _focal(p)


def box_cost(pred_box, gt_box, w: CostWeights = CostWeights()) -> float:
    a, b = cxcywh_to_xyxy(pred_box), cxcywh_to_xyxy(gt_box)
    return w.w_l1 * l1_box(pred_box, gt_box) + w.w_giou * (1.0 - giou(a, b))


def padded_cost_matrix(
    probs: np.ndarray,
    boxes: np.ndarray,
    target_classes: np.ndarray,
    target_boxes: np.ndarray,
    w: CostWeights,
) -> np.ndarray:
    """N x N cost: T target columns then N - T background columns.

    Background columns carry only the classification cost.
    """
    return _kernels.padded_cost(
        probs, boxes, target_classes, target_boxes, w.w_cls, w.w_l1, w.w_giou, w.cls_mode == "focal"
    )


def _assign_padded(cost: np.ndarray, n_targets: int) -> AssignmentResult:
    res = hungarian(cost)
    assign = res.assign.copy()
    assign[assign >= n_targets] = BACKGROUND
    return AssignmentResult(assign, res.total_cost)


def set_loss_grad(
    preds: PredictionSet,
    assign: np.ndarray,
    soft_targets: np.ndarray,
    target_boxes: np.ndarray,
    w: CostWeights,
    *,
    use_cls: bool = True,
    use_box: bool = True,
) -> tuple[float, PredGrad]:
    """Training-form loss for a fixed assignment.

    ``assign[i]`` indexes rows of ``soft_targets``/``target_boxes`` or is
    BACKGROUND, in which case prediction ``i`` is pushed toward the
    background slot and its box is unsupervised.
    """
    loss, gp, gb = _kernels.set_loss(
        preds.probs, preds.boxes, assign, soft_targets, target_boxes,
        w.w_cls, w.w_l1, w.w_giou, use_cls, use_box,
    )
    return float(loss), PredGrad(gp, gb)


def one_hot(labels: np.ndarray, n_slots: int) -> np.ndarray:
    out = np.zeros((len(labels), n_slots))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def det_loss_grad(
    preds: PredictionSet,
    targets: Targets,
    w: CostWeights = CostWeights(),
    assignment: AssignmentResult | None = None,
) -> tuple[float, PredGrad, AssignmentResult]:
    """Detection loss, its gradient, and the assignment it was taken under."""
    n, t = len(preds), len(targets)
    if t > n:
        raise ValueError(f"{t} ground-truth objects but only {n} predictions")
    if t and (targets.labels.min() < 0 or targets.labels.max() >= preds.background):
        raise ValueError("ground-truth class outside the foreground range")
    if assignment is None:
        cost = padded_cost_matrix(preds.probs, preds.boxes, targets.labels, targets.boxes, w)
        assignment = _assign_padded(cost, t)
    soft = one_hot(targets.labels, preds.probs.shape[1])
    loss, grad = set_loss_grad(preds, assignment.assign, soft, targets.boxes, w)
    return loss, grad, assignment


def match_and_det_loss(
    preds: PredictionSet, targets: Targets, w: CostWeights = CostWeights()
) -> tuple[AssignmentResult, float]:
    loss, _, assignment = det_loss_grad(preds, targets, w)
    return assignment, loss
