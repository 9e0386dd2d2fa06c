"""Finite-difference verification of every analytic gradient.

Each check draws a random configuration, evaluates the analytic gradient,
and compares it with central differences on a random subset of input
coordinates. The error of one configuration is
``max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-10)``
over the sampled coordinates. Assignments are held fixed where the loss
accepts them, matching the convention that matching is a constant of the
backward pass.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .assign_kd import AssignmentPrior, assign_kd_loss_grad
from .feature_kd import AdaptationLayer, feat_kd_target_aware_grad, feat_kd_vanilla_grad, query_masks
from .logits_kd import logits_kd_neg_grad, logits_kd_pos_grad, logits_kd_progressive_grad, split_teacher
from .matching_cost import CostWeights, PredictionSet, Targets, det_loss_grad
from .toy.model import OutputGrad, backward, forward, init_params
from .toy.scenes import make_dataset
from .toy.train import DistillConfig, TeacherKnowledge, TrainConfig, batch_loss_grad, init_student, total_loss

STEP = 1e-6
TOLERANCE = 1e-4
N_CLASSES = 3


@dataclass
class Problem:
    """``loss()`` reads ``inputs`` in place; ``grads`` align with ``inputs``."""

    loss: Callable[[], float]
    inputs: list[np.ndarray]
    grads: list[np.ndarray]


@dataclass
class CheckResult:
    name: str
    configs: int
    worst: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.configs == 0 or self.worst <= TOLERANCE


def _probs(rng, n, c=N_CLASSES + 1):
    p = rng.dirichlet(np.ones(c), n)
    p = np.maximum(p, 1e-3)
    return p / p.sum(axis=1, keepdims=True)


def _boxes(rng, n):
    wh = rng.uniform(0.08, 0.4, (n, 2))
    return np.concatenate([rng.uniform(0.2, 0.8, (n, 2)), wh], axis=1)


def _targets(rng, n_max):
    t = int(rng.integers(1, n_max + 1))
    return Targets(rng.integers(0, N_CLASSES, t), _boxes(rng, t))


def _preds(rng, n, group="default"):
    return PredictionSet(_probs(rng, n), _boxes(rng, n), group=group)


def _det(rng) -> Problem:
    n = int(rng.integers(2, 9))
    s, tg = _preds(rng, n), _targets(rng, min(n, 5))
    _, g, res = det_loss_grad(s, tg)
    return Problem(lambda: det_loss_grad(s, tg, assignment=res)[0], [s.probs, s.boxes], [g.probs, g.boxes])


def _teacher_split(rng, n):
    return split_teacher(_preds(rng, n), _targets(rng, min(n, 5)))


def _logits_pos(rng) -> Problem:
    n = int(rng.integers(3, 9))
    split, s = _teacher_split(rng, n), _preds(rng, n)
    _, g, a = logits_kd_pos_grad(split, s)
    return Problem(lambda: logits_kd_pos_grad(split, s, assign=a)[0], [s.probs, s.boxes], [g.probs, g.boxes])


def _logits_neg(rng) -> Problem:
    n = int(rng.integers(3, 9))
    split, s = _teacher_split(rng, n), _preds(rng, n)
    excluded = rng.permutation(n)[: int(rng.integers(0, n))]
    _, g, a = logits_kd_neg_grad(split, s, excluded=excluded)
    return Problem(lambda: logits_kd_neg_grad(split, s, excluded=excluded, assign=a)[0], [s.boxes], [g.boxes])


def _logits_progressive(rng) -> Problem:
    n, ks = int(rng.integers(3, 8)), int(rng.integers(1, 4))
    kt = ks + int(rng.integers(0, 3))
    tg = _targets(rng, min(n, 5))
    teacher = [_preds(rng, n) for _ in range(kt)]
    student = [_preds(rng, n) for _ in range(ks)]
    progressive = bool(rng.integers(0, 2))
    _, gl = logits_kd_progressive_grad(teacher, student, tg, progressive=progressive)
    return Problem(
        lambda: logits_kd_progressive_grad(teacher, student, tg, progressive=progressive)[0],
        [a for s in student for a in (s.probs, s.boxes)],
        [a for g in gl for a in (g.probs, g.boxes)],
    )


def _maps(rng):
    h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    d_s, d_t = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    f_t = rng.normal(size=(h, w, d_t))
    f_s = rng.normal(size=(h, w, d_s))
    phi = AdaptationLayer(rng.normal(size=(d_s, d_t)), rng.normal(size=d_t))
    return f_t, f_s, phi


def _feat_vanilla(rng) -> Problem:
    f_t, f_s, phi = _maps(rng)
    psi = rng.uniform(0.1, 2.0, f_t.shape[:2])
    _, g = feat_kd_vanilla_grad(f_t, f_s, phi, psi)
    return Problem(lambda: feat_kd_vanilla_grad(f_t, f_s, phi, psi)[0],
                   [f_s, phi.weight, phi.bias], [g.f_s, g.weight, g.bias])


def _feat_target_aware(rng) -> Problem:
    f_t, f_s, phi = _maps(rng)
    m = int(rng.integers(1, 6))
    masks = query_masks(f_t, rng.normal(size=(m, f_t.shape[2])))
    q = rng.uniform(0, 1, m) * (rng.random(m) > 0.3)
    _, g = feat_kd_target_aware_grad(f_t, f_s, phi, masks, q)
    return Problem(lambda: feat_kd_target_aware_grad(f_t, f_s, phi, masks, q)[0],
                   [f_s, phi.weight, phi.bias], [g.f_s, g.weight, g.bias])


def _assign_kd(rng) -> Problem:
    n = int(rng.integers(2, 9))
    tg = _targets(rng, min(n, 5))
    sigma = np.full(n, -1)
    sigma[rng.permutation(n)[: len(tg)]] = np.arange(len(tg))
    prior = AssignmentPrior(rng.normal(size=(n, 4)), sigma)
    s = _preds(rng, n, "prior")
    _, g = assign_kd_loss_grad(prior, s, tg)
    return Problem(lambda: assign_kd_loss_grad(prior, s, tg)[0], [s.probs, s.boxes], [g.probs, g.boxes])


def _small_model(rng, d, n, k):
    return init_params(d, n, k, rng)


def _model_backward(rng) -> Problem:
    d, n, k = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
    grid, b = 8, int(rng.integers(1, 3))
    params = _small_model(rng, d, n, k)
    grids = make_dataset(b, int(rng.integers(2**31)), grid=grid).grids
    out = forward(params, grids)
    # random linear functional of every output
    cp = [rng.normal(size=p.shape) for p in out.probs]
    cb = [rng.normal(size=x.shape) for x in out.boxes]
    cf = rng.normal(size=out.feats.shape)

    def loss():
        o = forward(params, grids)
        return float(sum(np.sum(a * p) for a, p in zip(cp, o.probs)) + sum(np.sum(a * x) for a, x in zip(cb, o.boxes))
                     + np.sum(cf * o.feats))

    grads, dq, dr = backward(params, out, OutputGrad(cp, cb, cf))
    grads["query"], grads["ref"] = dq, dr
    keys = sorted(params)
    return Problem(loss, [params[k_] for k_ in keys], [grads[k_] for k_ in keys])


def _total(rng) -> Problem:
    n, k = int(rng.integers(5, 7)), int(rng.integers(1, 3))
    ds = make_dataset(2, int(rng.integers(2**31)), grid=8)
    teacher = _small_model(rng, 6, n, k + int(rng.integers(0, 2)))
    comps = frozenset(c for c in ("LD", "FD", "AD") if rng.random() < 0.7) or frozenset({"LD", "FD", "AD"})
    cfg = TrainConfig(d=4, n_queries=n, n_stages=k, distill=DistillConfig(components=comps))
    kn = TeacherKnowledge.build(teacher, ds)
    params = init_student(cfg, rng, 6)
    idx = [0, 1]
    _, grads = batch_loss_grad(params, ds.grids, ds.targets(), cfg, kn, idx)

    def loss():
        c, _ = batch_loss_grad(params, ds.grids, ds.targets(), cfg, kn, idx, need_grad=False)
        return total_loss(c, cfg.distill)

    keys = sorted(params)
    return Problem(loss, [params[k_] for k_ in keys], [grads[k_] for k_ in keys])


CHECKS: dict[str, Callable[[np.random.Generator], Problem]] = {
    "det": _det,
    "logits_pos": _logits_pos,
    "logits_neg": _logits_neg,
    "logits_progressive": _logits_progressive,
    "feat_vanilla": _feat_vanilla,
    "feat_target_aware": _feat_target_aware,
    "assign_kd": _assign_kd,
    "total": _total,
    "model_backward": _model_backward,
}


def check_problem(prob: Problem, rng: np.random.Generator, max_coords: int = 40,
                  perturb: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    coords = [(i, idx) for i, a in enumerate(prob.inputs) for idx in np.ndindex(a.shape)]
    if len(coords) > max_coords:
        coords = [coords[j] for j in rng.choice(len(coords), max_coords, replace=False)]
    ana, num = [], []
    for i, idx in coords:
        a = prob.inputs[i]
        old = a[idx]
        a[idx] = old + STEP
        up = prob.loss()
        a[idx] = old - STEP
        down = prob.loss()
        a[idx] = old
        num.append((up - down) / (2 * STEP))
        g = prob.grads[i] if perturb is None else perturb(prob.grads[i])
        ana.append(g[idx])
    ana, num = np.array(ana), np.array(num)
    scale = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-10)
    return float(np.abs(ana - num).max(initial=0.0) / scale)


def run_check(name: str, configs: int = 100, seed: int = 0, max_coords: int = 40, perturb=None) -> CheckResult:
    build = CHECKS[name]
    ss = np.random.SeedSequence(seed, spawn_key=(list(CHECKS).index(name),))
    rng = np.random.default_rng(ss)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(configs):
        err = check_problem(build(rng), rng, max_coords, perturb)
        worst = err if math.isnan(err) else max(worst, err)
        if math.isnan(worst):
            break
    return CheckResult(name, configs, worst, time.perf_counter() - t0)


def run_grad_check(seed: int = 0, only=None, configs: int = 100, max_coords: int = 40, perturb=None) -> list[CheckResult]:
    names = list(CHECKS) if only is None else ([only] if isinstance(only, str) else list(only))
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {list(CHECKS)}")
    return [run_check(n, configs, seed, max_coords, perturb) for n in names]
