"""Target-aware feature distillation.

Teacher queries select regions of the teacher feature map through
dot-product masks; each mask is weighted by the quality of the teacher
prediction made from that query. Feature maps are ``(H, W, d)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdaptationLayer:
    """Learnable linear map from student channels to teacher channels."""

    weight: np.ndarray  # (d_S, d)
    bias: np.ndarray  # (d,)

    @classmethod
    def init(cls, d_student: int, d_teacher: int, rng: np.random.Generator) -> "AdaptationLayer":
        w = rng.normal(0.0, 1.0 / np.sqrt(d_student), (d_student, d_teacher))
        return cls(w, np.zeros(d_teacher))

    def __call__(self, f_s: np.ndarray) -> np.ndarray:
        return f_s @ self.weight + self.bias


@dataclass
class FeatKDGrad:
    f_s: np.ndarray
    weight: np.ndarray
    bias: np.ndarray


def _check_maps(f_t: np.ndarray, f_s: np.ndarray, phi: AdaptationLayer):
    if f_t.ndim != 3 or f_s.ndim != 3 or f_t.shape[:2] != f_s.shape[:2]:
        raise ValueError(f"feature maps disagree: {f_t.shape} vs {f_s.shape}")
    if phi.weight.shape != (f_s.shape[2], f_t.shape[2]):
        raise ValueError(f"adaptation layer {phi.weight.shape} does not map {f_s.shape[2]} -> {f_t.shape[2]}")


def query_mask(f_t: np.ndarray, query: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Spatial softmax of ``F_t . q / temperature``, scaled to mean 1."""
    return query_masks(f_t, np.asarray(query)[None, :], temperature)[0]


def query_masks(f_t: np.ndarray, queries: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Masks for M queries at once, shape ``(M, H, W)``."""
    f_t = np.asarray(f_t, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    h, w, d = f_t.shape
    if queries.shape[-1] != d:
        raise ValueError(f"query dim {queries.shape[-1]} != feature dim {d}")
    raw = queries @ f_t.reshape(h * w, d).T / temperature
    raw -= raw.max(axis=1, keepdims=True)
    e = np.exp(raw)
    masks = e / e.sum(axis=1, keepdims=True) * (h * w)
    return masks.reshape(-1, h, w)


def quality_score(c, iou, gamma: float = 0.5):
    """``c**gamma * iou**(1 - gamma)``; ``0**0`` is 1."""
    return np.power(c, gamma) * np.power(iou, 1.0 - gamma)


def weighted_imitation_grad(f_t, f_s, phi: AdaptationLayer, weight_map) -> tuple[float, FeatKDGrad]:
    """``sum_x weight_map(x) * ||F_t(x) - phi(F_s)(x)||^2`` and its gradient.

    Leading axes are free, so a batch of maps can be passed as
    ``(B, H, W, d)`` with a ``(B, H, W)`` weight map.
    """
    delta = f_t - phi(f_s)
    loss = float(np.sum(weight_map[..., None] * delta**2))
    g_adapted = -2.0 * weight_map[..., None] * delta
    d_s = f_s.shape[-1]
    flat_s = f_s.reshape(-1, d_s)
    flat_g = g_adapted.reshape(flat_s.shape[0], -1)
    grad = FeatKDGrad(
        f_s=(flat_g @ phi.weight.T).reshape(f_s.shape),
        weight=flat_s.T @ flat_g,
        bias=flat_g.sum(axis=0),
    )
    return loss, grad


def vanilla_weight_map(psi: np.ndarray, d: int) -> np.ndarray:
    h, w = psi.shape
    return psi**2 / (d * h * w)


def target_aware_weight_map(masks: np.ndarray, qualities: np.ndarray, d: int) -> np.ndarray:
    m, h, w = masks.shape
    return np.tensordot(qualities, masks**2, axes=1) / (m * d * h * w)


def feat_kd_vanilla_grad(f_t, f_s, phi: AdaptationLayer, psi) -> tuple[float, FeatKDGrad]:
    f_t, f_s, psi = (np.asarray(a, dtype=np.float64) for a in (f_t, f_s, psi))
    _check_maps(f_t, f_s, phi)
    if psi.shape != f_t.shape[:2]:
        raise ValueError("mask shape does not match feature map")
    return weighted_imitation_grad(f_t, f_s, phi, vanilla_weight_map(psi, f_t.shape[2]))


def feat_kd_vanilla(f_t, f_s, phi: AdaptationLayer, psi) -> float:
    return feat_kd_vanilla_grad(f_t, f_s, phi, psi)[0]


def mean_mask(masks: np.ndarray) -> np.ndarray:
    return np.asarray(masks).mean(axis=0)


def feat_kd_target_aware_grad(f_t, f_s, phi: AdaptationLayer, masks, qualities) -> tuple[float, FeatKDGrad]:
    """Quality-weighted sum of per-query masked imitation losses.

    ``masks`` is ``(M, H, W)`` (see :func:`query_masks`), ``qualities``
    length M.
    """
    f_t, f_s, masks, q = (np.asarray(a, dtype=np.float64) for a in (f_t, f_s, masks, qualities))
    _check_maps(f_t, f_s, phi)
    if masks.ndim != 3 or masks.shape[1:] != f_t.shape[:2] or q.shape != (masks.shape[0],):
        raise ValueError("masks must be (M, H, W) with M qualities")
    return weighted_imitation_grad(f_t, f_s, phi, target_aware_weight_map(masks, q, f_t.shape[2]))


def feat_kd_target_aware(f_t, f_s, phi: AdaptationLayer, masks, qualities) -> float:
    return feat_kd_target_aware_grad(f_t, f_s, phi, masks, qualities)[0]


def quality_weighted_mask(masks, qualities) -> np.ndarray:
    """``sum_i q_i * psi_i`` over queries, shape ``(H, W)``."""
    return np.tensordot(np.asarray(qualities, dtype=np.float64), np.asarray(masks, dtype=np.float64), axes=1)
