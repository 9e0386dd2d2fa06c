"""Hungarian-matching logits distillation.

Teacher predictions matched to ground truth act as soft pseudo targets for
the student (classification and box). The remaining teacher predictions
supervise only the boxes of student predictions not already claimed by a
positive. Losses are summed over decoder stages, each student stage taking
its teacher stage from :func:`stage_map`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .assignment import BACKGROUND, hungarian
from .matching_cost import (
    CostWeights,
    PredGrad,
    PredictionSet,
    Targets,
    det_loss_grad,
    padded_cost_matrix,
    set_loss_grad,
)


@dataclass
class TeacherSplit:
    teacher: PredictionSet
    pos_idx: np.ndarray  # teacher rows matched to a ground-truth object
    pos_gt: np.ndarray  # matched ground-truth index for each positive
    neg_idx: np.ndarray

    def __post_init__(self):
        t = self.teacher
        self.pos_probs = t.probs[self.pos_idx]
        self.pos_boxes = t.boxes[self.pos_idx]
        self.pos_hard = np.argmax(self.pos_probs[:, :-1], axis=1) if len(self.pos_idx) else np.zeros(0, np.int64)
        self.neg_boxes = t.boxes[self.neg_idx]

    @property
    def n_pos(self) -> int:
        return len(self.pos_idx)

    @property
    def n_neg(self) -> int:
        return len(self.neg_idx)


@dataclass(frozen=True)
class LogitsTerms:
    """Which logits-KD terms are active (all on by default)."""

    pos_cls: bool = True
    pos_reg: bool = True
    neg_reg: bool = True


def split_teacher(teacher: PredictionSet, targets: Targets, w: CostWeights = CostWeights()) -> TeacherSplit:
    _, _, res = det_loss_grad(teacher, targets, w)
    pos = np.flatnonzero(res.assign != BACKGROUND)
    neg = np.flatnonzero(res.assign == BACKGROUND)
    return TeacherSplit(teacher, pos, res.assign[pos], neg)


def _pos_assignment(split: TeacherSplit, student: PredictionSet, w: CostWeights) -> np.ndarray:
    cost = padded_cost_matrix(student.probs, student.boxes, split.pos_hard, split.pos_boxes, w)
    assign = hungarian(cost).assign
    assign[assign >= split.n_pos] = BACKGROUND
    return assign


def logits_kd_pos_grad(
    split: TeacherSplit,
    student: PredictionSet,
    w: CostWeights = CostWeights(),
    terms: LogitsTerms = LogitsTerms(),
    assign: np.ndarray | None = None,
) -> tuple[float, PredGrad, np.ndarray]:
    """Positive-branch loss, gradient, and the student->positive assignment."""
    if len(student) < split.n_pos:
        raise ValueError("fewer student predictions than teacher positives")
    if assign is None:
        assign = _pos_assignment(split, student, w)
    loss, grad = set_loss_grad(
        student,
        assign,
        split.pos_probs,
        split.pos_boxes,
        w,
        use_cls=terms.pos_cls,
        use_box=terms.pos_reg,
    )
    return loss, grad, assign


def logits_kd_pos(split: TeacherSplit, student: PredictionSet, w: CostWeights = CostWeights()) -> float:
    return logits_kd_pos_grad(split, student, w)[0]


def logits_kd_neg_grad(
    split: TeacherSplit,
    student: PredictionSet,
    w: CostWeights = CostWeights(),
    excluded: np.ndarray | None = None,
    assign: np.ndarray | None = None,
) -> tuple[float, PredGrad, np.ndarray]:
    """Box-only distillation toward teacher negatives.

    ``excluded`` lists student rows already matched to teacher positives;
    computed from the positive branch when omitted. Returns the loss, the
    gradient, and a length-N vector mapping student rows to teacher rows
    (BACKGROUND where unmatched).
    """
    n = len(student)
    grad = PredGrad.zeros_like(student)
    if excluded is None:
        pos_assign = _pos_assignment(split, student, w)
        excluded = np.flatnonzero(pos_assign != BACKGROUND)
    free = np.ones(n, dtype=bool)
    free[excluded] = False
    eligible = np.flatnonzero(free)
    if assign is None:
        assign = np.full(n, BACKGROUND, dtype=np.int64)
        if split.n_neg and len(eligible):
            cost = _kernels.box_cost_matrix(
                student.boxes[eligible], split.neg_boxes, w.w_l1, w.w_giou
            )
            sub = hungarian(cost).assign
            ok = sub != BACKGROUND
            assign[eligible[ok]] = split.neg_idx[sub[ok]]
    rows = np.flatnonzero(assign != BACKGROUND)
    if not len(rows):
        return 0.0, grad, assign
    loss, gb = _kernels.box_loss_grad(student.boxes[rows], split.teacher.boxes[assign[rows]], w.w_l1, w.w_giou)
    grad.boxes[rows] = gb
    return float(loss), grad, assign


def logits_kd_neg(split: TeacherSplit, student: PredictionSet, w: CostWeights = CostWeights()) -> float:
    return logits_kd_neg_grad(split, student, w)[0]


def stage_map(k_teacher: int, k_student: int) -> list[int]:
    """1-based teacher stage distilled into each student stage.

    Teacher stages are cut into ``k_student`` contiguous groups whose sizes
    differ by at most one, surplus stages going to the central groups; the
    last stage of each group is the source.
    """
    if k_student < 1 or k_teacher < k_student:
        raise ValueError(f"cannot map {k_teacher} teacher stages onto {k_student} student stages")
    base, extra = divmod(k_teacher, k_student)
    start = (k_student - extra) // 2
    out, end = [], 0
    for g in range(k_student):
        end += base + (1 if start <= g < start + extra else 0)
        out.append(end)
    return out


def logits_kd_progressive_grad(
    teacher_stages: list[PredictionSet],
    student_stages: list[PredictionSet],
    targets: Targets,
    w: CostWeights = CostWeights(),
    terms: LogitsTerms = LogitsTerms(),
    progressive: bool = True,
    splits: list[TeacherSplit] | None = None,
) -> tuple[float, list[PredGrad]]:
    """Sum of positive and negative KD over student stages.

    With ``progressive=False`` every student stage is distilled from the
    teacher's last stage. ``splits`` may carry precomputed teacher splits,
    one per teacher stage.
    """
    kt, ks = len(teacher_stages), len(student_stages)
    src = stage_map(kt, ks) if progressive else [kt] * ks
    total = 0.0
    grads = []
    for k, s in enumerate(student_stages):
        tk = src[k] - 1
        split = splits[tk] if splits is not None else split_teacher(teacher_stages[tk], targets, w)
        lp, gp, pos_assign = logits_kd_pos_grad(split, s, w, terms)
        grad = gp
        total += lp
        if terms.neg_reg:
            ln, gn, _ = logits_kd_neg_grad(split, s, w, excluded=np.flatnonzero(pos_assign != BACKGROUND))
            total += ln
            grad.boxes += gn.boxes
        grads.append(grad)
    return total, grads


def logits_kd_progressive(teacher_stages, student_stages, targets, w=CostWeights(), **kw) -> float:
    return logits_kd_progressive_grad(teacher_stages, student_stages, targets, w, **kw)[0]
