"""COCO-style average precision and ablation tables."""

from __future__ import annotations

import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .geometry import cxcywh_to_xyxy, pairwise_iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    score: float
    box: tuple  # cx, cy, w, h


@dataclass(frozen=True)
class GTBox:
    image_id: int
    class_id: int
    box: tuple


@dataclass
class APResult:
    per_class: dict[int, float]  # averaged over thresholds
    per_threshold: dict[float, float]  # averaged over classes
    mAP: float


def greedy_match(scores: np.ndarray, ious: np.ndarray, threshold: float) -> np.ndarray:
    """TP flags for detections visited in descending score order.

    ``ious`` is detections x ground truth for one image. Each detection takes
    the highest-IoU unmatched ground truth at or above the threshold.
    """
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(len(scores), dtype=bool)
    for i in order:
        best, best_iou = -1, threshold
        for j in range(ious.shape[1]):
            if not taken[j] and ious[i, j] >= best_iou:
                if best < 0 or ious[i, j] > ious[i, best]:
                    best, best_iou = j, ious[i, j]
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return tp


def interpolated_ap(tp: np.ndarray, scores: np.ndarray, n_pos: int) -> float:
    """101-point interpolated AP from per-detection TP flags."""
    if n_pos == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order].astype(np.float64)
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_pos
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(
    dets: Iterable[Detection],
    gts: Iterable[GTBox],
    iou_thresholds: Iterable[float] = COCO_THRESHOLDS,
) -> APResult:
    thresholds = [float(t) for t in iou_thresholds]
    by_cls_det: dict[int, dict[int, list[Detection]]] = defaultdict(lambda: defaultdict(list))
    by_cls_gt: dict[int, dict[int, list[GTBox]]] = defaultdict(lambda: defaultdict(list))
    for d in dets:
        by_cls_det[d.class_id][d.image_id].append(d)
    for g in gts:
        by_cls_gt[g.class_id][g.image_id].append(g)

    table = np.full((len(thresholds), 0), np.nan)
    classes = sorted(by_cls_gt)
    cols = []
    for c in classes:
        n_pos = sum(len(v) for v in by_cls_gt[c].values())
        scores_all = []
        tp_all = [[] for _ in thresholds]
        for img, dl in by_cls_det[c].items():
            sc = np.array([d.score for d in dl])
            gl = by_cls_gt[c].get(img, [])
            if gl:
                ious = pairwise_iou(cxcywh_to_xyxy([d.box for d in dl]), cxcywh_to_xyxy([g.box for g in gl]))
            else:
                ious = np.zeros((len(dl), 0))
            scores_all.append(sc)
            for ti, t in enumerate(thresholds):
                tp_all[ti].append(greedy_match(sc, ious, t))
        scores = np.concatenate(scores_all) if scores_all else np.zeros(0)
        cols.append([
            interpolated_ap(np.concatenate(tp_all[ti]) if scores_all else np.zeros(0, bool), scores, n_pos)
            for ti in range(len(thresholds))
        ])
    if cols:
        table = np.array(cols).T
    per_class = {c: float(np.mean(table[:, i])) for i, c in enumerate(classes)}
    per_thr = {t: float(np.mean(table[ti])) if classes else 0.0 for ti, t in enumerate(thresholds)}
    mAP = float(np.mean(table)) if classes else 0.0
    return APResult(per_class, per_thr, mAP)


ABLATION_ROWS = ("none", "LD", "FD", "AD", "LD+FD", "LD+FD+AD")
TABLE_COLUMNS = ("setting", "mAP", "delta")


def ablation_table(run_logs: Mapping[str, float | None], rows: Iterable[str] = ABLATION_ROWS) -> list[dict]:
    """Rows in fixed order; runs missing from ``run_logs`` are marked absent.

    ``delta`` is relative to the ``none`` row when it is present.
    """
    base = run_logs.get("none")
    out = []
    for name in rows:
        v = run_logs.get(name)
        if v is None:
            out.append({"setting": name, "mAP": None, "delta": None})
        else:
            out.append({"setting": name, "mAP": v, "delta": None if base is None else v - base})
    return out


def _fmt(v, signed=False) -> str:
    if v is None:
        return "absent"
    return f"{100 * v:+.2f}" if signed else f"{100 * v:.2f}"


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TABLE_COLUMNS) + "\n")
    for r in rows:
        buf.write(f"{r['setting']},{_fmt(r['mAP'])},{_fmt(r['delta'], True)}\n")
    return buf.getvalue()


def table_text(rows: list[dict]) -> str:
    cells = [TABLE_COLUMNS] + [(r["setting"], _fmt(r["mAP"]), _fmt(r["delta"], True)) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(3)]
    lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i]) for i in range(3)) for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
