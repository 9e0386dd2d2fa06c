"""Pure-Python / NumPy kernels. Same signatures and results as ``_core``."""

from __future__ import annotations

import numpy as np

from .geometry import cxcywh_to_xyxy, giou_grad, pairwise_giou, xyxy_grad_to_cxcywh

BACKGROUND = -1
EPS_PROB = 1e-12


def tie_tolerance(cost: np.ndarray) -> float:
    n = max(cost.shape)
    scale = float(np.max(np.abs(cost))) if cost.size else 0.0
    return 1e-10 * n * (1.0 + scale)


def _solve_square(c: list[list[float]], n: int):
    # Shortest augmenting path with row/column potentials (Jonker-Volgenant style).
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = c[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_of = [p[j] - 1 for j in range(1, n + 1)]
    col_of = [0] * n
    for j, r in enumerate(row_of):
        col_of[r] = j
    return col_of, row_of, u[1:], v[1:]


def _lex_refine(c, n, n_real_rows, n_real_cols, col_of, row_of, u, v, eps):
    """Walk rows in order, moving each to the smallest column that still
    admits a perfect matching on the tight (zero reduced cost) edges."""
    locked_row = [False] * n
    locked_col = [False] * n

    def tight(i, j):
        return c[i][j] - u[i] - v[j] <= eps

    def dfs(r, target, seen, path):
        for cc in range(n):
            if seen[cc] or locked_col[cc] or not tight(r, cc):
                continue
            seen[cc] = True
            if cc == target or dfs(row_of[cc], target, seen, path):
                path.append((r, cc))
                return True
        return False

    for i in range(n_real_rows):
        old = col_of[i]
        locked_row[i] = True
        for j in range(min(old, n_real_cols)):
            if locked_col[j] or not tight(i, j):
                continue
            seen = [False] * n
            seen[j] = True
            path: list[tuple[int, int]] = []
            if not dfs(row_of[j], old, seen, path):
                continue
            for rr, cc in path:
                col_of[rr] = cc
                row_of[cc] = rr
            col_of[i] = j
            row_of[j] = i
            break
        locked_col[col_of[i]] = True


def lsa_lex(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment; lexicographically smallest among optima.

    ``cost`` is R x C. Returns a length-R int64 vector of column indices,
    ``BACKGROUND`` for rows left unassigned when R > C.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    nr, nc = cost.shape
    n = max(nr, nc)
    sq = np.zeros((n, n))
    sq[:nr, :nc] = cost
    c = sq.tolist()
    col_of, row_of, u, v = _solve_square(c, n)
    _lex_refine(c, n, nr, nc, col_of, row_of, u, v, tie_tolerance(cost))
    out = np.array(col_of[:nr], dtype=np.int64)
    out[out >= nc] = BACKGROUND
    return out


def box_cost_matrix(pred: np.ndarray, tgt: np.ndarray, w_l1: float, w_giou: float) -> np.ndarray:
    """``w_l1 * L1 + w_giou * (1 - GIoU)`` for every (pred, target) pair."""
    pred = np.asarray(pred, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    l1 = np.abs(pred[:, None, :] - tgt[None, :, :]).sum(-1)
    g = pairwise_giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(tgt))
    return w_l1 * l1 + w_giou * (1.0 - g)


def box_loss_grad(pred: np.ndarray, tgt: np.ndarray, w_l1: float, w_giou: float):
    """Summed box loss over aligned pairs and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if pred.shape[0] == 0:
        return 0.0, np.zeros_like(pred)
    d = pred - tgt
    l1 = np.abs(d).sum()
    g, ga, _ = giou_grad(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(tgt))
    loss = w_l1 * l1 + w_giou * float(np.sum(1.0 - g))
    grad = w_l1 * np.sign(d) - w_giou * xyxy_grad_to_cxcywh(ga)
    return float(loss), grad


def _focal(p: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    p = np.clip(p, EPS_PROB, 1 - EPS_PROB)
    return alpha * (1 - p) ** gamma * -np.log(p) - (1 - alpha) * p**gamma * -np.log(1 - p)


def padded_cost(probs, boxes, tgt_cls, tgt_boxes, w_cls, w_l1, w_giou, focal=False):
    """N x N matching cost, target columns then background columns."""
    probs = np.asarray(probs, dtype=np.float64)
    tgt_cls = np.asarray(tgt_cls, dtype=np.int64)
    n, t = probs.shape[0], len(tgt_cls)
    sel = np.concatenate([tgt_cls, np.full(n - t, probs.shape[1] - 1, dtype=np.int64)])
    pc = probs[:, sel]
    cost = w_cls * (_focal(pc) if focal else -pc)
    if t:
        cost[:, :t] += box_cost_matrix(boxes, np.asarray(tgt_boxes).reshape(-1, 4), w_l1, w_giou)
    return cost


def set_loss(probs, boxes, assign, soft, tgt_boxes, w_cls, w_l1, w_giou, use_cls=True, use_box=True):
    """Cross-entropy to soft targets (background for unassigned rows) plus
    box loss on assigned rows; returns (loss, grad_probs, grad_boxes)."""
    probs = np.asarray(probs, dtype=np.float64)
    assign = np.asarray(assign, dtype=np.int64)
    loss = 0.0
    gp = np.zeros_like(probs)
    gb = np.zeros((len(probs), 4))
    fg = assign >= 0
    if use_cls and w_cls:
        tgt = np.zeros_like(probs)
        tgt[fg] = np.asarray(soft)[assign[fg]]
        tgt[~fg, -1] = 1.0
        safe = np.maximum(probs, EPS_PROB)
        active = tgt > 0
        loss += w_cls * float(-np.sum(np.where(active, tgt * np.log(safe), 0.0)))
        gp = np.where(active & (probs >= EPS_PROB), -w_cls * tgt / safe, 0.0)
    if use_box and fg.any():
        rows = np.flatnonzero(fg)
        bl, g = box_loss_grad(np.asarray(boxes)[rows], np.asarray(tgt_boxes)[assign[rows]], w_l1, w_giou)
        loss += bl
        gb[rows] = g
    return loss, gp, gb


def solve(cost):
    """(assignment, total cost) of ``lsa_lex`` on a finite matrix.

    The total is accumulated in row order. Raises ValueError on NaN or inf.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains NaN or infinite entries")
    assign = lsa_lex(cost)
    total = 0.0
    for i, j in enumerate(assign.tolist()):
        if j != BACKGROUND:
            total += float(cost[i, j])
    return assign, total


def attention(scores, box, cx, cy, scale, prior):
    """softmax over cells of ``scale * scores - prior * ((dx/w)^2 + (dy/h)^2)``.

    ``scores`` is (B, Q, X) raw dot products, ``box`` (B, Q, 4) the boxes the
    prior is centred on, ``cx``/``cy`` the X cell centres.
    """
    dx = (cx - box[..., 0:1]) / box[..., 2:3]
    dy = (cy - box[..., 1:2]) / box[..., 3:4]
    z = scale * scores - prior * (dx * dx + dy * dy)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_backward(att, datt, box, cx, cy, prior):
    """Gradients of :func:`attention` given d loss / d att.

    Returns (d logits, d box), where the logits are the pre-softmax values
    and d box covers only the prior term.
    """
    ds = att * (datt - np.sum(att * datt, axis=-1, keepdims=True))
    dx = cx - box[..., 0:1]
    dy = cy - box[..., 1:2]
    w, h = box[..., 2], box[..., 3]
    db = np.stack([
        2 * prior * np.sum(ds * dx, axis=-1) / w**2,
        2 * prior * np.sum(ds * dy, axis=-1) / h**2,
        2 * prior * np.sum(ds * dx * dx, axis=-1) / w**3,
        2 * prior * np.sum(ds * dy * dy, axis=-1) / h**3,
    ], axis=-1)
    return ds, db
