"""Query-prior assignment distillation and the stage instability metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import BACKGROUND
from .matching_cost import CostWeights, PredGrad, PredictionSet, Targets, det_loss_grad, one_hot, set_loss_grad

PRIOR_GROUP = "prior"


@dataclass
class AssignmentPrior:
    queries: np.ndarray  # (M, d) teacher queries, constants
    sigma: np.ndarray  # (M,) ground-truth index per teacher query, or BACKGROUND

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.int64)
        fg = self.sigma[self.sigma != BACKGROUND]
        if len(np.unique(fg)) != len(fg):
            raise ValueError("teacher assignment repeats a ground-truth index")


def teacher_prior(teacher_last: PredictionSet, queries: np.ndarray, targets: Targets,
                  w: CostWeights = CostWeights()) -> AssignmentPrior:
    """The teacher's own Hungarian assignment on this image."""
    _, _, res = det_loss_grad(teacher_last, targets, w)
    return AssignmentPrior(np.asarray(queries), res.assign)


def assign_kd_loss_grad(
    prior: AssignmentPrior,
    student_on_prior: PredictionSet,
    targets: Targets,
    w: CostWeights = CostWeights(),
) -> tuple[float, PredGrad]:
    """Detection loss of the prior-query group under the teacher's assignment.

    The assignment is reused verbatim; the matcher is never called.
    """
    if len(student_on_prior) != len(prior.sigma):
        raise ValueError("one student prediction per teacher query expected")
    fg = prior.sigma[prior.sigma != BACKGROUND]
    if len(fg) and (fg.max() >= len(targets) or fg.min() < 0):
        raise ValueError("teacher assignment references a missing ground-truth object")
    soft = one_hot(targets.labels, student_on_prior.probs.shape[1])
    return set_loss_grad(student_on_prior, prior.sigma, soft, targets.boxes, w)


def assign_kd_loss(prior, student_on_prior, targets, w=CostWeights()) -> float:
    return assign_kd_loss_grad(prior, student_on_prior, targets, w)[0]


def stage_index_vector(preds: PredictionSet, targets: Targets, w: CostWeights = CostWeights()) -> np.ndarray:
    """Matched ground-truth index per prediction, -1 when unmatched."""
    _, _, res = det_loss_grad(preds, targets, w)
    return res.assign.copy()


def instability(v_k, v_next) -> int:
    """Number of positions whose assignment differs between two stages."""
    v_k, v_next = np.asarray(v_k), np.asarray(v_next)
    if v_k.shape != v_next.shape:
        raise ValueError("index vectors differ in length")
    return int(np.count_nonzero(v_k != v_next))


def image_instability(stages: list[PredictionSet], targets: Targets, w: CostWeights = CostWeights()) -> np.ndarray:
    """IS between each pair of consecutive stages of one image."""
    if len(stages) < 2:
        raise ValueError("instability needs at least two decoder stages")
    vs = [stage_index_vector(s, targets, w) for s in stages]
    return np.array([instability(a, b) for a, b in zip(vs[:-1], vs[1:])], dtype=np.float64)


def model_instability(
    dataset_stages: list[list[PredictionSet]],
    targets: list[Targets],
    w: CostWeights = CostWeights(),
) -> tuple[float, np.ndarray]:
    """Mean IS over stage pairs and images, plus the per-stage-pair means."""
    if not dataset_stages:
        raise ValueError("empty dataset")
    per = np.zeros(len(dataset_stages[0]) - 1)
    for stages, tg in zip(dataset_stages, targets):
        per += image_instability(stages, tg, w)
    per /= len(dataset_stages)
    return float(per.mean()), per
