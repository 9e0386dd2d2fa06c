"""A miniature set-prediction detector with hand-written backpropagation.

Encoder: per-cell ``tanh`` of a linear map of (input channels, fixed
positional features). Decoder: K stages, each query attends to the encoder
map (softmax of scaled dot products plus a Gaussian log-prior centred on the
query's current box), pools features and position moments,
updates its state with a residual tanh perceptron and emits class
probabilities and an additively refined box in logit space. Queries never
attend to each other, so query groups are independent.

Parameters live in a flat ``dict[str, ndarray]``; keys prefixed ``kd_``
are distillation-only and ignored at evaluation.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels
from .scenes import CHANNELS, N_CLASSES, cell_centers

FREQS = (1.0, 2.0, 4.0)


@functools.lru_cache(maxsize=8)
def _grid_constants(grid: int):
    out = (positional_features(grid), position_moments(grid)) + cell_centers(grid)
    for a in out:
        a.setflags(write=False)
    return out


def positional_features(grid: int) -> np.ndarray:
    xs, ys = cell_centers(grid)
    cols = []
    for f in FREQS:
        cols += [np.sin(np.pi * f * xs), np.cos(np.pi * f * xs), np.sin(np.pi * f * ys), np.cos(np.pi * f * ys)]
    return np.stack(cols, axis=1)


def position_moments(grid: int) -> np.ndarray:
    xs, ys = cell_centers(grid)
    x, y = xs - 0.5, ys - 0.5
    return np.stack([x, y, x * x, y * y], axis=1)


N_POS = 4 * len(FREQS)
BOX_PRIOR = 2.0  # attention log-prior: -BOX_PRIOR * ((dx / w)^2 + (dy / h)^2)


def stage_keys(k: int) -> list[str]:
    return [f"s{k}.{n}" for n in ("w1", "b1", "w2", "b2", "wc", "bc", "wb", "bb")]


def init_params(
    d: int,
    n_queries: int,
    n_stages: int,
    rng: np.random.Generator,
    *,
    n_classes: int = N_CLASSES,
    channels: int = CHANNELS,
    hidden: int | None = None,
) -> dict[str, np.ndarray]:
    hidden = hidden or 2 * d
    p = {
        "enc_w": rng.normal(0, 1 / np.sqrt(channels + N_POS), (channels + N_POS, d)),
        "enc_b": np.zeros(d),
        "query": rng.normal(0, 1.0, (n_queries, d)),
        "ref": _logit(np.concatenate([rng.uniform(0.15, 0.85, (n_queries, 2)),
                                      rng.uniform(0.2, 0.3, (n_queries, 2))], axis=1)),
    }
    for k in range(n_stages):
        w1, b1, w2, b2, wc, bc, wb, bb = stage_keys(k)
        p[w1] = rng.normal(0, 1 / np.sqrt(2 * d + 4), (2 * d + 4, hidden))
        p[b1] = np.zeros(hidden)
        p[w2] = rng.normal(0, 0.5 / np.sqrt(hidden), (hidden, d))
        p[b2] = np.zeros(d)
        p[wc] = rng.normal(0, 1 / np.sqrt(d), (d, n_classes + 1))
        p[bc] = np.zeros(n_classes + 1)
        p[wb] = rng.normal(0, 0.1 / np.sqrt(d + 4), (d + 4, 4))
        p[bb] = np.zeros(4)
    return p


def model_dims(params: dict[str, np.ndarray]) -> tuple[int, int, int]:
    """(d, n_queries, n_stages)."""
    n_stages = sum(1 for k in params if k.endswith(".w1"))
    return params["enc_w"].shape[1], params["query"].shape[0], n_stages


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over leading axes of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardOutput:
    probs: list[np.ndarray]  # per stage, (B, Q, C+1)
    boxes: list[np.ndarray]  # per stage, (B, Q, 4)
    feats: np.ndarray  # (B, HW, d)
    states: list[np.ndarray]  # query states after each stage, (B, Q, d)
    grid: int
    cache: dict = field(repr=False, default_factory=dict)

    @property
    def n_stages(self) -> int:
        return len(self.probs)

    def feature_map(self, b: int) -> np.ndarray:
        return self.feats[b].reshape(self.grid, self.grid, -1)


def forward(
    params: dict[str, np.ndarray],
    grids: np.ndarray,
    queries: np.ndarray | None = None,
    refs: np.ndarray | None = None,
) -> ForwardOutput:
    """Run the detector on ``grids`` (B, G, G, C).

    ``queries``/``refs`` default to the model's own; pass other rows (for
    example a prior group concatenated after the own queries) to decode them
    with the same decoder.
    """
    grids = np.asarray(grids, dtype=np.float64)
    b, g, _, cin = grids.shape
    d, _, n_stages = model_dims(params)
    hw = g * g
    pos, mom, cx_cells, cy_cells = _grid_constants(g)
    z_enc = np.concatenate([grids.reshape(b, hw, cin), np.broadcast_to(pos, (b, hw, pos.shape[1]))], axis=2)
    feats = np.tanh(z_enc @ params["enc_w"] + params["enc_b"])

    q0 = params["query"] if queries is None else queries
    r0 = params["ref"] if refs is None else refs
    h = np.broadcast_to(q0, (b,) + q0.shape)
    r = np.broadcast_to(r0, (b,) + r0.shape)
    scale = 1.0 / np.sqrt(d)
    feats_t = feats.transpose(0, 2, 1)

    out = ForwardOutput([], [], feats, [], g)
    stage_cache = []
    for k in range(n_stages):
        w1, b1, w2, b2, wc, bc, wb, bb = (params[n] for n in stage_keys(k))
        box_in = _sigmoid(r)
        att = _kernels.attention(h @ feats_t, box_in, cx_cells, cy_cells, scale, BOX_PRIOR)
        ctx = att @ feats
        m = att @ mom
        z = np.concatenate([h, ctx, m], axis=2)
        u = np.tanh(z @ w1 + b1)
        h_new = h + u @ w2 + b2
        probs = _softmax(h_new @ wc + bc)
        zb = np.concatenate([h_new, m], axis=2)
        r = r + zb @ wb + bb
        box = _sigmoid(r)
        stage_cache.append((h, att, z, u, zb, probs, box, box_in))
        out.probs.append(probs)
        out.boxes.append(box)
        out.states.append(h_new)
        h = h_new
    out.cache = {"z_enc": z_enc, "stages": stage_cache, "mom": mom}
    return out


@dataclass
class OutputGrad:
    """Loss gradients w.r.t. forward outputs."""

    probs: list[np.ndarray]
    boxes: list[np.ndarray]
    feats: np.ndarray | None = None


def zero_output_grad(out: ForwardOutput) -> OutputGrad:
    return OutputGrad([np.zeros_like(p) for p in out.probs], [np.zeros_like(x) for x in out.boxes], None)


def backward(
    params: dict[str, np.ndarray], out: ForwardOutput, grad: OutputGrad
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter.

    Returns ``(grads, d_queries, d_refs)``; the latter two are the gradients
    w.r.t. the query rows and reference rows actually decoded (summed over
    the batch). ``grads['query']``/``grads['ref']`` are left zero, the caller
    routes ``d_queries``/``d_refs`` to whichever parameters produced them.
    """
    d, _, n_stages = model_dims(params)
    feats = out.feats
    mom = out.cache["mom"]
    _, _, cx_cells, cy_cells = _grid_constants(out.grid)
    scale = 1.0 / np.sqrt(d)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    d_feats = np.zeros_like(feats) if grad.feats is None else grad.feats.copy()
    dh_next = None
    dr = None
    for k in reversed(range(n_stages)):
        w1, b1, w2, b2, wc, bc, wb, bb = stage_keys(k)
        h, att, z, u, zb, probs, box, box_in = out.cache["stages"][k]
        dbox = grad.boxes[k]
        dr_k = dbox * box * (1.0 - box)
        dr = dr_k if dr is None else dr + dr_k
        # box refinement
        grads[wb] += _outer_sum(zb, dr)
        grads[bb] += dr.sum(axis=(0, 1))
        dzb = dr @ params[wb].T
        dh_new = dzb[..., :d].copy()
        dm = dzb[..., d:].copy()
        # classification head
        dp = grad.probs[k]
        dlog = probs * (dp - np.sum(probs * dp, axis=-1, keepdims=True))
        h_new = out.states[k]
        grads[wc] += _outer_sum(h_new, dlog)
        grads[bc] += dlog.sum(axis=(0, 1))
        dh_new += dlog @ params[wc].T
        if dh_next is not None:
            dh_new += dh_next
        # residual perceptron
        dh = dh_new.copy()
        grads[w2] += _outer_sum(u, dh_new)
        grads[b2] += dh_new.sum(axis=(0, 1))
        dpre = (dh_new @ params[w2].T) * (1.0 - u * u)
        grads[w1] += _outer_sum(z, dpre)
        grads[b1] += dpre.sum(axis=(0, 1))
        dz = dpre @ params[w1].T
        dh += dz[..., :d]
        dctx = dz[..., d : 2 * d]
        dm += dz[..., 2 * d :]
        # attention pooling
        datt = dctx @ feats.transpose(0, 2, 1) + dm @ mom.T
        ds, dbox_in = _kernels.attention_backward(att, datt, box_in, cx_cells, cy_cells, BOX_PRIOR)
        d_feats += att.transpose(0, 2, 1) @ dctx
        d_feats += ds.transpose(0, 2, 1) @ h * scale
        dh += ds @ feats * scale
        dh_next = dh
        dr = dr + dbox_in * box_in * (1.0 - box_in)
    dpre_enc = d_feats * (1.0 - feats * feats)
    z_enc = out.cache["z_enc"]
    grads["enc_w"] += _outer_sum(z_enc, dpre_enc)
    grads["enc_b"] += dpre_enc.sum(axis=(0, 1))
    return grads, dh_next.sum(axis=0), dr.sum(axis=0)
