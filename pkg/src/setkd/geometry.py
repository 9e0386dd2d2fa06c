"""Box formats, IoU / GIoU / L1 primitives and their analytic gradients.

Boxes are float64 arrays whose last axis holds four coordinates, either
center format ``(cx, cy, w, h)`` or corner format ``(x1, y1, x2, y2)``.
Zero-area boxes have IoU and GIoU 0 against anything, with zero gradient.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class InvalidBoxError(ValueError):
    pass


class BoxCxCyWh(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class BoxXyXy(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float


def _arr(b) -> np.ndarray:
    return np.asarray(b, dtype=np.float64)


def cxcywh_to_xyxy(b) -> np.ndarray:
    b = _arr(b)
    if np.any(b[..., 2:] < 0):
        raise InvalidBoxError("box width and height must be non-negative")
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(b) -> np.ndarray:
    b = _arr(b)
    if np.any(b[..., 2:] < b[..., :2]):
        raise InvalidBoxError("corner box must satisfy x2 >= x1 and y2 >= y1")
    x1, y1, x2, y2 = np.moveaxis(b, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def to_xyxy(b: BoxCxCyWh) -> BoxXyXy:
    return BoxXyXy(*cxcywh_to_xyxy(b).tolist())


def from_xyxy(b: BoxXyXy) -> BoxCxCyWh:
    return BoxCxCyWh(*xyxy_to_cxcywh(b).tolist())


def _parts(a: np.ndarray, b: np.ndarray):
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    valid = (area_a > 0) & (area_b > 0)
    return area_a, area_b, iw, ih, inter, union, ew, eh, valid


def iou(a, b) -> np.ndarray | float:
    """Elementwise IoU of corner-format boxes (broadcasting)."""
    a, b = _arr(a), _arr(b)
    *_, inter, union, _, _, valid = _parts(a, b)
    out = np.where(valid, inter / np.where(valid, union, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def giou(a, b) -> np.ndarray | float:
    """Elementwise generalized IoU of corner-format boxes (broadcasting)."""
    a, b = _arr(a), _arr(b)
    *_, inter, union, ew, eh, valid = _parts(a, b)
    union = np.where(valid, union, 1.0)
    encl = np.where(valid, ew * eh, 1.0)
    # encl >= union exactly; the clamp keeps rounding from lifting giou above iou
    out = np.where(valid, inter / union - np.maximum(encl - union, 0.0) / encl, 0.0)
    return float(out) if out.ndim == 0 else out


def pairwise_iou(a, b) -> np.ndarray:
    return np.asarray(iou(_arr(a)[:, None, :], _arr(b)[None, :, :]))


def pairwise_giou(a, b) -> np.ndarray:
    return np.asarray(giou(_arr(a)[:, None, :], _arr(b)[None, :, :]))


def l1_box(a, b) -> np.ndarray | float:
    """Sum of absolute coordinate differences, center format."""
    out = np.abs(_arr(a) - _arr(b)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def l1_box_grad(a, b):
    """Value and gradients of ``l1_box`` w.r.t. ``a`` and ``b``."""
    a, b = _arr(a), _arr(b)
    s = np.sign(a - b)
    return l1_box(a, b), s, -s


def giou_grad(a, b):
    """GIoU of corner boxes with gradients w.r.t. both boxes.

    Returns ``(value, grad_a, grad_b)``; gradients have the shape of the
    broadcast inputs. Ties inside min/max pick one side (a subgradient).
    """
    a, b = np.broadcast_arrays(_arr(a), _arr(b))
    area_a, area_b, iw, ih, inter, union, ew, eh, valid = _parts(a, b)
    union_s = np.where(valid, union, 1.0)
    encl = np.where(valid, ew * eh, 1.0)
    val = np.where(valid, inter / union_s - np.maximum(encl - union_s, 0.0) / encl, 0.0)

    # d giou = dI/U + dU (1/E - I/U^2) - (U/E^2) dE
    g_i = 1.0 / union_s
    g_u = 1.0 / encl - inter / union_s**2
    g_e = -union_s / encl**2
    g_i = g_i - g_u  # dU = dA + dB - dI

    ga = np.zeros_like(a)
    gb = np.zeros_like(b)

    # own-area terms
    wa, ha = a[..., 2] - a[..., 0], a[..., 3] - a[..., 1]
    wb, hb = b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]
    for g, w, h, coef in ((ga, wa, ha, g_u), (gb, wb, hb, g_u)):
        g[..., 0] -= coef * h
        g[..., 2] += coef * h
        g[..., 1] -= coef * w
        g[..., 3] += coef * w

    # intersection: inter = iw * ih, iw = min(x2) - max(x1)
    pos_w = iw > 0
    pos_h = ih > 0
    di_dw = np.where(pos_w & pos_h, g_i * ih, 0.0)
    di_dh = np.where(pos_w & pos_h, g_i * iw, 0.0)
    a_x2 = a[..., 2] <= b[..., 2]
    a_x1 = a[..., 0] >= b[..., 0]
    a_y2 = a[..., 3] <= b[..., 3]
    a_y1 = a[..., 1] >= b[..., 1]
    ga[..., 2] += np.where(a_x2, di_dw, 0.0)
    gb[..., 2] += np.where(a_x2, 0.0, di_dw)
    ga[..., 0] -= np.where(a_x1, di_dw, 0.0)
    gb[..., 0] -= np.where(a_x1, 0.0, di_dw)
    ga[..., 3] += np.where(a_y2, di_dh, 0.0)
    gb[..., 3] += np.where(a_y2, 0.0, di_dh)
    ga[..., 1] -= np.where(a_y1, di_dh, 0.0)
    gb[..., 1] -= np.where(a_y1, 0.0, di_dh)

    # enclosing box: ew = max(x2) - min(x1)
    de_dw = g_e * eh
    de_dh = g_e * ew
    e_x2 = a[..., 2] >= b[..., 2]
    e_x1 = a[..., 0] <= b[..., 0]
    e_y2 = a[..., 3] >= b[..., 3]
    e_y1 = a[..., 1] <= b[..., 1]
    ga[..., 2] += np.where(e_x2, de_dw, 0.0)
    gb[..., 2] += np.where(e_x2, 0.0, de_dw)
    ga[..., 0] -= np.where(e_x1, de_dw, 0.0)
    gb[..., 0] -= np.where(e_x1, 0.0, de_dw)
    ga[..., 3] += np.where(e_y2, de_dh, 0.0)
    gb[..., 3] += np.where(e_y2, 0.0, de_dh)
    ga[..., 1] -= np.where(e_y1, de_dh, 0.0)
    gb[..., 1] -= np.where(e_y1, 0.0, de_dh)

    ga = np.where(valid[..., None], ga, 0.0)
    gb = np.where(valid[..., None], gb, 0.0)
    if val.ndim == 0:
        val = float(val)
    return val, ga, gb


def xyxy_grad_to_cxcywh(g: np.ndarray) -> np.ndarray:
    """Chain a corner-format gradient back to center format."""
    g = _arr(g)
    gx = g[..., 0] + g[..., 2]
    gy = g[..., 1] + g[..., 3]
    gw = 0.5 * (g[..., 2] - g[..., 0])
    gh = 0.5 * (g[..., 3] - g[..., 1])
    return np.stack([gx, gy, gw, gh], axis=-1)
