"""Training and distillation on synthetic scenes.

The teacher is frozen, so everything the student needs from it (stage
predictions, positive/negative splits, feature maps, query masks, quality
scores, its own assignment) is computed once per scene up front.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..assign_kd import PRIOR_GROUP, AssignmentPrior, assign_kd_loss_grad, model_instability
from ..evaluation import Detection, GTBox, average_precision
from ..feature_kd import (
    AdaptationLayer,
    mean_mask,
    quality_score,
    query_masks,
    target_aware_weight_map,
    vanilla_weight_map,
    weighted_imitation_grad,
)
from ..geometry import cxcywh_to_xyxy, iou
from ..logits_kd import LogitsTerms, TeacherSplit, logits_kd_progressive_grad, split_teacher
from ..matching_cost import CostWeights, PredictionSet, Targets, det_loss_grad
from .model import ForwardOutput, OutputGrad, backward, forward, init_params, model_dims, zero_output_grad
from .scenes import Dataset

log = logging.getLogger(__name__)

COMPONENTS = ("LD", "FD", "AD")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    components: frozenset = frozenset()
    lambda_logits: float = 1.0
    lambda_feat: float = 20.0
    lambda_assign: float = 1.0
    gamma: float = 0.5
    feat_mode: str = "target_aware"  # or "vanilla"
    pos_cls: bool = True
    pos_reg: bool = True
    neg_reg: bool = True
    progressive: bool = True
    mask_temperature: float | None = None  # None: sqrt of teacher width

    def __post_init__(self):
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown distillation components {sorted(unknown)}")
        object.__setattr__(self, "components", frozenset(self.components))
        if self.feat_mode not in ("target_aware", "vanilla"):
            raise ValueError(f"unknown feat_mode {self.feat_mode!r}")

    @property
    def terms(self) -> LogitsTerms:
        return LogitsTerms(self.pos_cls, self.pos_reg, self.neg_reg)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 8
    seed: int = 0
    momentum: float = 0.9
    clip_norm: float = 100.0
    lr_drop_at: float = 0.8  # fraction of steps after which lr is scaled by lr_drop
    lr_drop: float = 0.1
    d: int = 16
    n_queries: int = 10
    n_stages: int = 3
    cost: CostWeights = CostWeights()
    distill: DistillConfig = DistillConfig()


@dataclass
class SceneKnowledge:
    stages: list[PredictionSet]
    splits: list[TeacherSplit]
    feats: np.ndarray  # (G, G, d_T)
    masks: np.ndarray  # (M, G, G)
    qualities: np.ndarray  # (M,)
    prior: AssignmentPrior
    feat_weights: dict  # feat_mode -> (G, G) imitation weight map


@dataclass
class TeacherKnowledge:
    scenes: list[SceneKnowledge]
    queries: np.ndarray  # teacher query parameters (M, d_T)
    refs: np.ndarray  # teacher reference box logits (M, 4)
    d: int

    @classmethod
    def build(cls, teacher: dict, dataset: Dataset, w: CostWeights = CostWeights(),
              gamma: float = 0.5, mask_temperature: float | None = None, batch: int = 100) -> "TeacherKnowledge":
        d_t = model_dims(teacher)[0]
        temp = math.sqrt(d_t) if mask_temperature is None else mask_temperature
        scenes = []
        for lo in range(0, len(dataset), batch):
            out = forward(teacher, dataset.grids[lo : lo + batch])
            for b in range(out.feats.shape[0]):
                tg = dataset.scenes[lo + b].targets
                stages = stage_sets(out, b)
                splits = [split_teacher(s, tg, w) for s in stages]
                last, split = stages[-1], splits[-1]
                fmap = out.feature_map(b)
                masks = query_masks(fmap, out.states[-1][b], temp)
                q = np.zeros(len(last))
                if split.n_pos:
                    score = last.probs[split.pos_idx, :-1].max(axis=1)
                    ov = iou(cxcywh_to_xyxy(tg.boxes[split.pos_gt]), cxcywh_to_xyxy(last.boxes[split.pos_idx]))
                    q[split.pos_idx] = quality_score(score, np.atleast_1d(ov), gamma)
                sigma = np.full(len(last), -1, dtype=np.int64)
                sigma[split.pos_idx] = split.pos_gt
                prior = AssignmentPrior(teacher["query"], sigma)
                fw = {"target_aware": target_aware_weight_map(masks, q, d_t),
                      "vanilla": vanilla_weight_map(mean_mask(masks), d_t)}
                scenes.append(SceneKnowledge(stages, splits, fmap, masks, q, prior, fw))
        return cls(scenes, teacher["query"].copy(), teacher["ref"].copy(), d_t)


def stage_sets(out: ForwardOutput, b: int, rows: slice = slice(None), group: str = "default") -> list[PredictionSet]:
    return [PredictionSet(p[b, rows], x[b, rows], group=group) for p, x in zip(out.probs, out.boxes)]


def init_student(cfg: TrainConfig, rng: np.random.Generator, d_teacher: int | None = None) -> dict:
    params = init_params(cfg.d, cfg.n_queries, cfg.n_stages, rng)
    comps = cfg.distill.components
    if "AD" in comps:
        params["kd_prior_proj"] = rng.normal(0, 1 / math.sqrt(d_teacher), (d_teacher, cfg.d))
    if "FD" in comps:
        phi = AdaptationLayer.init(cfg.d, d_teacher, rng)
        params["kd_phi_w"], params["kd_phi_b"] = phi.weight, phi.bias
    return params


@dataclass
class LossComponents:
    det: float = 0.0
    logits: float = 0.0
    feat: float = 0.0
    assign: float = 0.0

    def total(self, cfg: DistillConfig) -> float:
        return total_loss(self, cfg)

    def __iadd__(self, other: "LossComponents"):
        self.det += other.det
        self.logits += other.logits
        self.feat += other.feat
        self.assign += other.assign
        return self

    def scaled(self, s: float) -> "LossComponents":
        return LossComponents(self.det * s, self.logits * s, self.feat * s, self.assign * s)


def total_loss(c: LossComponents, cfg: DistillConfig = DistillConfig()) -> float:
    """``det + l1 * logits + l2 * feat + l3 * assign``."""
    return c.det + cfg.lambda_logits * c.logits + cfg.lambda_feat * c.feat + cfg.lambda_assign * c.assign


def student_forward(params: dict, grids: np.ndarray, knowledge: TeacherKnowledge | None, use_prior: bool):
    if not use_prior:
        return forward(params, grids)
    q = np.vstack([params["query"], knowledge.queries @ params["kd_prior_proj"]])
    r = np.vstack([params["ref"], knowledge.refs])
    return forward(params, grids, q, r)


def batch_loss_grad(
    params: dict,
    grids: np.ndarray,
    targets: list[Targets],
    cfg: TrainConfig,
    knowledge: TeacherKnowledge | None = None,
    scene_idx: list[int] | None = None,
    need_grad: bool = True,
) -> tuple[LossComponents, dict | None]:
    """Mean per-image loss components over a batch and the parameter gradients."""
    dc = cfg.distill
    comps = dc.components if knowledge is not None else frozenset()
    use_prior = "AD" in comps
    n = params["query"].shape[0]
    bsz = grids.shape[0]
    out = student_forward(params, grids, knowledge, use_prior)
    og = zero_output_grad(out)
    acc = LossComponents()
    w = cfg.cost
    for b in range(bsz):
        tg = targets[b]
        own = stage_sets(out, b, slice(0, n))
        part = LossComponents()
        for k, s in enumerate(own):
            l, g, _ = det_loss_grad(s, tg, w)
            part.det += l
            og.probs[k][b, :n] += g.probs
            og.boxes[k][b, :n] += g.boxes
        if not comps:
            acc += part
            continue
        kn = knowledge.scenes[scene_idx[b]]
        if "LD" in comps:
            l, gl = logits_kd_progressive_grad(kn.stages, own, tg, w, dc.terms, dc.progressive, kn.splits)
            part.logits = l
            for k, g in enumerate(gl):
                og.probs[k][b, :n] += dc.lambda_logits * g.probs
                og.boxes[k][b, :n] += dc.lambda_logits * g.boxes
        if "AD" in comps:
            prior_sets = stage_sets(out, b, slice(n, None), PRIOR_GROUP)
            for k, s in enumerate(prior_sets):
                l, g = assign_kd_loss_grad(kn.prior, s, tg, w)
                part.assign += l
                og.probs[k][b, n:] += dc.lambda_assign * g.probs
                og.boxes[k][b, n:] += dc.lambda_assign * g.boxes
        acc += part
    phi = None
    if "FD" in comps:
        # The imitation loss is separable per image, so the batch goes in one call.
        phi = AdaptationLayer(params["kd_phi_w"], params["kd_phi_b"])
        gs = out.grid
        f_t = np.stack([knowledge.scenes[i].feats for i in scene_idx])
        wmap = np.stack([knowledge.scenes[i].feat_weights[dc.feat_mode] for i in scene_idx])
        l, fg = weighted_imitation_grad(f_t, out.feats.reshape(bsz, gs, gs, -1), phi, wmap)
        acc.feat += l
        og.feats = dc.lambda_feat * fg.f_s.reshape(out.feats.shape)
    acc = acc.scaled(1.0 / bsz)
    if not need_grad:
        return acc, None
    inv = 1.0 / bsz
    og.probs = [p * inv for p in og.probs]
    og.boxes = [x * inv for x in og.boxes]
    if og.feats is not None:
        og.feats *= inv
    grads, dq, dr = backward(params, out, og)
    grads["query"] = dq[:n]
    grads["ref"] = dr[:n]
    if use_prior:
        grads["kd_prior_proj"] = knowledge.queries.T @ dq[n:]
    if phi is not None:
        grads["kd_phi_w"] = dc.lambda_feat * fg.weight * inv
        grads["kd_phi_b"] = dc.lambda_feat * fg.bias * inv
    return acc, grads


def detections(preds: PredictionSet, image_id: int) -> list[Detection]:
    """Scored detections from the student's own query group."""
    if preds.group == PRIOR_GROUP:
        raise ValueError("prior-query predictions are train-only and cannot be evaluated")
    fg = preds.probs[:, :-1]
    cls = fg.argmax(axis=1)
    score = fg.max(axis=1)
    return [Detection(image_id, int(c), float(s), tuple(b)) for c, s, b in zip(cls, score, preds.boxes)]


@dataclass
class EvalMetrics:
    mAP: float
    ap50: float
    mean_is: float
    is_per_stage: np.ndarray


def evaluate(params: dict, dataset: Dataset, w: CostWeights = CostWeights(), batch: int = 100) -> EvalMetrics:
    dets, gts, all_stages = [], [], []
    for lo in range(0, len(dataset), batch):
        out = forward({k: v for k, v in params.items() if not k.startswith("kd_")}, dataset.grids[lo : lo + batch])
        for b in range(out.feats.shape[0]):
            i = lo + b
            stages = stage_sets(out, b)
            all_stages.append(stages)
            dets += detections(stages[-1], i)
            sc = dataset.scenes[i]
            gts += [GTBox(i, int(c), tuple(x)) for c, x in zip(sc.labels, sc.boxes)]
    ap = average_precision(dets, gts)
    if len(all_stages[0]) >= 2:
        mean_is, per = model_instability(all_stages, dataset.targets(), w)
    else:
        mean_is, per = 0.0, np.zeros(0)
    return EvalMetrics(ap.mAP, ap.per_threshold[0.5], mean_is, per)


LOG_FIELDS = ("epoch", "step", "loss_total", "loss_det", "loss_logits", "loss_feat", "loss_assign", "mAP", "AP50", "mean_IS")


def _log_row(epoch, step, comps, cfg, m: EvalMetrics) -> dict:
    row = {"epoch": epoch, "step": step}
    if comps is None:
        for f in LOG_FIELDS[2:7]:
            row[f] = ""
    else:
        row.update(loss_total=f"{total_loss(comps, cfg.distill):.6f}", loss_det=f"{comps.det:.6f}",
                   loss_logits=f"{comps.logits:.6f}", loss_feat=f"{comps.feat:.6f}",
                   loss_assign=f"{comps.assign:.6f}")
    row.update(mAP=f"{m.mAP:.6f}", AP50=f"{m.ap50:.6f}", mean_IS=f"{m.mean_is:.6f}")
    for k, v in enumerate(m.is_per_stage):
        row[f"IS_{k + 1}_{k + 2}"] = f"{v:.6f}"
    return row


@dataclass
class TrainResult:
    params: dict
    log: list[dict] = field(default_factory=list)

    @property
    def final_map(self) -> float:
        return float(self.log[-1]["mAP"])


def clip_by_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def train(
    cfg: TrainConfig,
    train_set: Dataset,
    val_set: Dataset,
    teacher: dict | None = None,
    knowledge: TeacherKnowledge | None = None,
    eval_every: int = 1,
) -> TrainResult:
    """Momentum gradient descent; evaluates on ``val_set`` every ``eval_every`` epochs.

    Deterministic given ``cfg.seed``. Distillation components need a
    ``teacher`` (or prebuilt ``knowledge`` for ``train_set``).
    """
    comps = cfg.distill.components
    if comps and knowledge is None:
        if teacher is None:
            raise ValueError(f"components {sorted(comps)} need a teacher")
        knowledge = TeacherKnowledge.build(teacher, train_set, cfg.cost, cfg.distill.gamma,
                                           cfg.distill.mask_temperature)
    rng = np.random.default_rng(cfg.seed)
    params = init_student(cfg, rng, knowledge.d if knowledge else None)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(train_set)
    per_epoch = math.ceil(n / cfg.batch_size)
    result = TrainResult(params)
    result.log.append(_log_row(0, 0, None, cfg, evaluate(params, val_set, cfg.cost)))
    epoch_acc, epoch_n = LossComponents(), 0
    order = rng.permutation(n)
    for step in range(1, cfg.steps + 1):
        pos = (step - 1) % per_epoch
        if pos == 0 and step > 1:
            order = rng.permutation(n)
        idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size].tolist()
        comps_val, grads = batch_loss_grad(
            params, train_set.grids[idx], train_set.targets(idx), cfg, knowledge, idx
        )
        tot = total_loss(comps_val, cfg.distill)
        if not math.isfinite(tot):
            raise TrainingDiverged(f"non-finite loss at step {step}: {comps_val}")
        clip_by_norm(grads, cfg.clip_norm)
        lr = cfg.lr * (cfg.lr_drop if step > cfg.lr_drop_at * cfg.steps else 1.0)
        for k, g in grads.items():
            v = velocity[k]
            v *= cfg.momentum
            v += g
            params[k] -= lr * v
        epoch_acc += comps_val
        epoch_n += 1
        end_of_epoch = pos == per_epoch - 1 or step == cfg.steps
        if end_of_epoch:
            epoch = math.ceil(step / per_epoch)
            if epoch % eval_every == 0 or epoch == 1 or step == cfg.steps:
                m = evaluate(params, val_set, cfg.cost)
                result.log.append(_log_row(epoch, step, epoch_acc.scaled(1 / epoch_n), cfg, m))
                log.info("epoch %d step %d loss %.4f mAP %.4f IS %.3f", epoch, step,
                         total_loss(epoch_acc.scaled(1 / epoch_n), cfg.distill), m.mAP, m.mean_is)
            epoch_acc, epoch_n = LossComponents(), 0
    return result


def with_components(cfg: TrainConfig, components, **distill_overrides) -> TrainConfig:
    return replace(cfg, distill=replace(cfg.distill, components=frozenset(components), **distill_overrides))
