import numpy as np
import pytest

from setkd.assignment import BACKGROUND
from setkd.geometry import cxcywh_to_xyxy, giou
from setkd.logits_kd import (
    LogitsTerms,
    logits_kd_neg,
    logits_kd_neg_grad,
    logits_kd_pos,
    logits_kd_pos_grad,
    logits_kd_progressive,
    split_teacher,
    stage_map,
)
from setkd.matching_cost import PredictionSet, Targets


def _preds(rng, n):
    boxes = np.concatenate([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.1, 0.3, (n, 2))], 1)
    return PredictionSet(rng.dirichlet(np.ones(4), n), boxes)


def _box_loss(a, b):
    return 5 * np.abs(np.subtract(a, b)).sum() + 2 * (1 - giou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)))


def test_split_cardinalities():
    rng = np.random.default_rng(0)
    teacher = _preds(rng, 5)
    split = split_teacher(teacher, Targets([0, 2], [[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]]))
    assert (split.n_pos, split.n_neg) == (2, 3)
    assert sorted(split.pos_gt.tolist()) == [0, 1]
    empty = split_teacher(teacher, Targets())
    assert (empty.n_pos, empty.n_neg) == (0, 5)


def test_positives_always_equal_number_of_targets():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        t = int(rng.integers(0, n + 1))
        tg = Targets(rng.integers(0, 3, t), _preds(rng, t).boxes if t else np.zeros((0, 4)))
        assert split_teacher(_preds(rng, n), tg).n_pos == t


def test_pos_identical_student_reaches_teacher_entropy():
    t = PredictionSet([[0.7, 0.2, 0.05, 0.05], [0.1, 0.6, 0.2, 0.1]], [[0.25, 0.25, 0.2, 0.2], [0.75, 0.7, 0.2, 0.3]])
    split = split_teacher(t, Targets([0, 1], t.boxes))
    loss, _, assign = logits_kd_pos_grad(split, PredictionSet(t.probs.copy(), t.boxes.copy()))
    entropy = -np.sum(t.probs * np.log(t.probs))
    assert assign.tolist() == [0, 1]
    assert abs(loss - entropy) <= 1e-12


def test_pos_without_positives_is_background_only():
    rng = np.random.default_rng(2)
    s = _preds(rng, 4)
    split = split_teacher(_preds(rng, 4), Targets())
    assert abs(logits_kd_pos(split, s) + np.log(s.probs[:, -1]).sum()) <= 1e-12


def test_pos_one_positive_two_students_by_hand():
    teacher = PredictionSet([[0.6, 0.3, 0.05, 0.05], [0.1, 0.1, 0.1, 0.7]], [[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    split = split_teacher(teacher, Targets([0], [[0.31, 0.3, 0.2, 0.2]]))
    assert split.pos_idx.tolist() == [0]
    s = PredictionSet([[0.2, 0.2, 0.2, 0.4], [0.5, 0.1, 0.1, 0.3]], [[0.65, 0.7, 0.2, 0.2], [0.35, 0.3, 0.2, 0.25]])
    tp, tb = teacher.probs[0], teacher.boxes[0]
    # candidate: student i takes the positive (hard class 0), the other goes to background
    cost = [-s.probs[i, 0] + _box_loss(s.boxes[i], tb) - s.probs[1 - i, 3] for i in (0, 1)]
    i = int(np.argmin(cost))
    expected = -np.sum(tp * np.log(s.probs[i])) + _box_loss(s.boxes[i], tb) - np.log(s.probs[1 - i, 3])
    assert i == 1
    assert abs(logits_kd_pos(split, s) - expected) <= 1e-12


def test_pos_needs_enough_students():
    rng = np.random.default_rng(3)
    split = split_teacher(_preds(rng, 3), Targets([0, 1], _preds(rng, 2).boxes))
    with pytest.raises(ValueError):
        logits_kd_pos(split, _preds(rng, 1))


def test_neg_zero_when_boxes_coincide():
    rng = np.random.default_rng(4)
    t = _preds(rng, 4)
    split = split_teacher(t, Targets([1], [t.boxes[0]]))
    s = PredictionSet(rng.dirichlet(np.ones(4), 4), t.boxes.copy())
    assert logits_kd_neg(split, s) <= 1e-12


def test_neg_one_student_two_negatives_takes_cheaper():
    t = PredictionSet(np.full((2, 4), 0.25), [[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    split = split_teacher(t, Targets())
    s = PredictionSet([[0.1, 0.2, 0.3, 0.4]], [[0.62, 0.66, 0.25, 0.2]])
    options = [_box_loss(s.boxes[0], t.boxes[j]) for j in (0, 1)]
    loss, _, assign = logits_kd_neg_grad(split, s)
    assert assign.tolist() == [int(np.argmin(options))]
    assert abs(loss - min(options)) <= 1e-12


def test_neg_without_negatives_is_zero():
    t = PredictionSet([[0.5, 0.2, 0.2, 0.1]], [[0.3, 0.3, 0.2, 0.2]])
    split = split_teacher(t, Targets([0], [[0.3, 0.3, 0.2, 0.2]]))
    assert split.n_neg == 0
    assert logits_kd_neg(split, PredictionSet([[0.2, 0.2, 0.2, 0.4]], [[0.5, 0.5, 0.2, 0.2]])) == 0.0


def test_neg_ignores_class_probabilities():
    rng = np.random.default_rng(5)
    t, s = _preds(rng, 6), _preds(rng, 6)
    split = split_teacher(t, Targets([0, 1], t.boxes[:2] + 0.01))
    excluded = np.array([0, 3])
    base = logits_kd_neg_grad(split, s, excluded=excluded)[0]
    t2 = PredictionSet(rng.dirichlet(np.ones(4), 6), t.boxes)
    s2 = PredictionSet(rng.dirichlet(np.ones(4), 6), s.boxes)
    split2 = type(split)(t2, split.pos_idx, split.pos_gt, split.neg_idx)
    assert logits_kd_neg_grad(split2, s2, excluded=excluded)[0] == base


def test_neg_skips_students_claimed_by_positives():
    t = PredictionSet(np.full((2, 4), 0.25), [[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    split = split_teacher(t, Targets([0], [[0.3, 0.3, 0.2, 0.2]]))
    s = PredictionSet(np.full((2, 4), 0.25), [[0.7, 0.7, 0.2, 0.2], [0.3, 0.3, 0.2, 0.2]])
    _, _, assign = logits_kd_neg_grad(split, s, excluded=np.array([0]))
    assert assign[0] == BACKGROUND and assign[1] == split.neg_idx[0]


@pytest.mark.parametrize("kt, ks, expected", [
    (6, 6, [1, 2, 3, 4, 5, 6]),
    (6, 3, [2, 4, 6]),
    (6, 4, [1, 3, 5, 6]),
    (3, 1, [3]),
    (3, 3, [1, 2, 3]),
])
def test_stage_map(kt, ks, expected):
    assert stage_map(kt, ks) == expected


def test_stage_map_rejects_more_student_stages():
    with pytest.raises(ValueError):
        stage_map(2, 3)


def test_progressive_single_stage_is_pos_plus_neg():
    rng = np.random.default_rng(6)
    t, s = _preds(rng, 6), _preds(rng, 6)
    tg = Targets([2, 0], _preds(rng, 2).boxes)
    split = split_teacher(t, tg)
    _, _, pa = logits_kd_pos_grad(split, s)
    expected = logits_kd_pos(split, s) + logits_kd_neg_grad(split, s, excluded=np.flatnonzero(pa != BACKGROUND))[0]
    assert abs(logits_kd_progressive([t], [s], tg) - expected) <= 1e-12


def test_progressive_is_sum_of_stage_losses():
    rng = np.random.default_rng(7)
    teacher = [_preds(rng, 5) for _ in range(4)]
    student = [_preds(rng, 5) for _ in range(2)]
    tg = Targets([0, 1, 2], _preds(rng, 3).boxes)
    per_stage = [logits_kd_progressive([teacher[src - 1]], [s], tg) for s, src in zip(student, stage_map(4, 2))]
    assert abs(logits_kd_progressive(teacher, student, tg) - sum(per_stage)) <= 1e-10
    last = sum(logits_kd_progressive([teacher[-1]], [s], tg) for s in student)
    assert abs(logits_kd_progressive(teacher, student, tg, progressive=False) - last) <= 1e-10


def test_progressive_identical_models_reach_per_stage_minimum():
    boxes = np.array([[0.2, 0.2, 0.1, 0.1], [0.8, 0.2, 0.1, 0.1], [0.2, 0.8, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]])
    probs = [np.array([[0.8, 0.1, 0.05, 0.05], [0.1, 0.1, 0.1, 0.7], [0.05, 0.85, 0.05, 0.05], [0.1, 0.1, 0.2, 0.6]]),
             np.array([[0.9, 0.04, 0.03, 0.03], [0.1, 0.05, 0.05, 0.8], [0.02, 0.9, 0.04, 0.04], [0.05, 0.05, 0.1, 0.8]])]
    stages = [PredictionSet(p, boxes) for p in probs]
    tg = Targets([0, 1], boxes[[0, 2]])
    copies = [PredictionSet(p.probs.copy(), p.boxes.copy()) for p in stages]
    # positives are rows 0 and 2; the rest match teacher negatives with identical boxes (zero box loss)
    minima = sum(-np.sum(p[[0, 2]] * np.log(p[[0, 2]])) - np.log(p[[1, 3], -1]).sum() for p in probs)
    assert abs(logits_kd_progressive(stages, copies, tg) - minima) <= 1e-12


def test_zero_targets_finite():
    rng = np.random.default_rng(9)
    t, s = _preds(rng, 5), _preds(rng, 5)
    assert np.isfinite(logits_kd_progressive([t, t], [s, s], Targets()))


def test_terms_switch_components_off():
    rng = np.random.default_rng(10)
    t, s = _preds(rng, 5), _preds(rng, 5)
    split = split_teacher(t, Targets([0, 1], _preds(rng, 2).boxes))
    full = logits_kd_pos_grad(split, s)[0]
    cls_only = logits_kd_pos_grad(split, s, terms=LogitsTerms(pos_reg=False))[0]
    box_only = logits_kd_pos_grad(split, s, terms=LogitsTerms(pos_cls=False))[0]
    assert abs(full - cls_only - box_only) <= 1e-12
