# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: lexicographic Hungarian solver and box cost/loss loops."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, log, isfinite, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef int BACKGROUND = -1


cdef inline double _max(double a, double b) nogil:
    return a if a > b else b


cdef inline double _min(double a, double b) nogil:
    return a if a < b else b


cdef void _solve_square(double* c, int n, int* col_of, int* row_of,
                        double* u, double* v) nogil:
    cdef int i, j, i0, j0, j1
    cdef double delta, cur
    cdef int* p = <int*> malloc((n + 1) * sizeof(int))
    cdef int* way = <int*> malloc((n + 1) * sizeof(int))
    cdef double* minv = <double*> malloc((n + 1) * sizeof(double))
    cdef char* used = <char*> malloc((n + 1) * sizeof(char))
    for j in range(n + 1):
        p[j] = 0
        way[j] = 0
        u[j] = 0.0
        v[j] = 0.0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[(i0 - 1) * n + j - 1] - u[i0] - v[j]
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
    for j in range(1, n + 1):
        row_of[j - 1] = p[j] - 1
        col_of[p[j] - 1] = j - 1
    free(p)
    free(way)
    free(minv)
    free(used)


cdef struct Ctx:
    double* c
    double* u
    double* v
    int* row_of
    char* locked_col
    char* seen
    int n
    double eps


cdef inline bint _tight(Ctx* x, int i, int j) nogil:
    return x.c[i * x.n + j] - x.u[i + 1] - x.v[j + 1] <= x.eps


cdef bint _dfs(Ctx* x, int r, int target, int* path_r, int* path_c, int* plen) nogil:
    cdef int cc
    for cc in range(x.n):
        if x.seen[cc] or x.locked_col[cc] or not _tight(x, r, cc):
            continue
        x.seen[cc] = 1
        if cc == target or _dfs(x, x.row_of[cc], target, path_r, path_c, plen):
            path_r[plen[0]] = r
            path_c[plen[0]] = cc
            plen[0] += 1
            return True
    return False


def lsa_lex(cost):
    """Minimum-cost assignment; lexicographically smallest among optima.

    ``cost`` is R x C. Returns a length-R int64 vector of column indices,
    -1 for rows left unassigned when R > C.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] a = np.ascontiguousarray(cost, dtype=np.float64)
    cdef int nr = a.shape[0]
    cdef int nc = a.shape[1]
    cdef int n = nr if nr > nc else nc
    cdef int i, j, k, old, limit
    cdef double scale = 0.0
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] sq = np.zeros((n, n))
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(nr, dtype=np.int64)
    for i in range(nr):
        for j in range(nc):
            sq[i, j] = a[i, j]
            if fabs(a[i, j]) > scale:
                scale = fabs(a[i, j])

    cdef double* u = <double*> malloc((n + 1) * sizeof(double))
    cdef double* v = <double*> malloc((n + 1) * sizeof(double))
    cdef int* col_of = <int*> malloc(n * sizeof(int))
    cdef int* row_of = <int*> malloc(n * sizeof(int))
    cdef char* locked_col = <char*> malloc(n * sizeof(char))
    cdef char* seen = <char*> malloc(n * sizeof(char))
    cdef int* path_r = <int*> malloc(n * sizeof(int))
    cdef int* path_c = <int*> malloc(n * sizeof(int))
    cdef int plen
    cdef Ctx x

    with nogil:
        _solve_square(&sq[0, 0], n, col_of, row_of, u, v)
        x.c = &sq[0, 0]
        x.u = u
        x.v = v
        x.row_of = row_of
        x.locked_col = locked_col
        x.seen = seen
        x.n = n
        x.eps = 1e-10 * n * (1.0 + scale)
        for j in range(n):
            locked_col[j] = 0
        for i in range(nr):
            old = col_of[i]
            limit = old if old < nc else nc
            for j in range(limit):
                if locked_col[j] or not _tight(&x, i, j):
                    continue
                for k in range(n):
                    seen[k] = 0
                seen[j] = 1
                plen = 0
                if not _dfs(&x, row_of[j], old, path_r, path_c, &plen):
                    continue
                for k in range(plen):
                    col_of[path_r[k]] = path_c[k]
                    row_of[path_c[k]] = path_r[k]
                col_of[i] = j
                row_of[j] = i
                break
            locked_col[col_of[i]] = 1

    for i in range(nr):
        out[i] = col_of[i] if col_of[i] < nc else BACKGROUND
    free(u)
    free(v)
    free(col_of)
    free(row_of)
    free(locked_col)
    free(seen)
    free(path_r)
    free(path_c)
    return out


cdef inline double _giou(double ax1, double ay1, double ax2, double ay2,
                         double bx1, double by1, double bx2, double by2) nogil:
    cdef double area_a = (ax2 - ax1) * (ay2 - ay1)
    cdef double area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    cdef double iw = _max(_min(ax2, bx2) - _max(ax1, bx1), 0.0)
    cdef double ih = _max(_min(ay2, by2) - _max(ay1, by1), 0.0)
    cdef double inter = iw * ih
    cdef double union = area_a + area_b - inter
    cdef double encl = (_max(ax2, bx2) - _min(ax1, bx1)) * (_max(ay2, by2) - _min(ay1, by1))
    return inter / union - _max(encl - union, 0.0) / encl


def box_cost_matrix(pred, tgt, double w_l1, double w_giou):
    """``w_l1 * L1 + w_giou * (1 - GIoU)`` for every (pred, target) pair."""
    cdef const double[:, ::1] p = np.ascontiguousarray(pred, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(tgt, dtype=np.float64)
    cdef int n = p.shape[0]
    cdef int m = t.shape[0]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] out = out_arr
    cdef int i, j
    cdef double l1, g
    with nogil:
        for i in range(n):
            for j in range(m):
                l1 = (fabs(p[i, 0] - t[j, 0]) + fabs(p[i, 1] - t[j, 1])
                      + fabs(p[i, 2] - t[j, 2]) + fabs(p[i, 3] - t[j, 3]))
                g = _giou(p[i, 0] - 0.5 * p[i, 2], p[i, 1] - 0.5 * p[i, 3],
                          p[i, 0] + 0.5 * p[i, 2], p[i, 1] + 0.5 * p[i, 3],
                          t[j, 0] - 0.5 * t[j, 2], t[j, 1] - 0.5 * t[j, 3],
                          t[j, 0] + 0.5 * t[j, 2], t[j, 1] + 0.5 * t[j, 3])
                out[i, j] = w_l1 * l1 + w_giou * (1.0 - g)
    return out_arr


cdef inline double _sign(double x) nogil:
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


cdef double _box_loss_row(const double* p, const double* t, double w_l1, double w_giou,
                          double* gr) nogil:
    # L1 + (1 - GIoU) for one aligned pair; writes d loss / d p into gr[0:4].
    cdef int k
    cdef double loss = 0.0
    cdef double a[4]
    cdef double b[4]
    cdef double ga[4]
    cdef double area_a, area_b, iw, ih, inter, union, ew, eh, encl
    cdef double g_i, g_u, g_e, di_dw, di_dh, de_dw, de_dh
    for k in range(4):
        loss += w_l1 * fabs(p[k] - t[k])
        gr[k] = w_l1 * _sign(p[k] - t[k])
    a[0] = p[0] - 0.5 * p[2]
    a[1] = p[1] - 0.5 * p[3]
    a[2] = p[0] + 0.5 * p[2]
    a[3] = p[1] + 0.5 * p[3]
    b[0] = t[0] - 0.5 * t[2]
    b[1] = t[1] - 0.5 * t[3]
    b[2] = t[0] + 0.5 * t[2]
    b[3] = t[1] + 0.5 * t[3]
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        return loss + w_giou
    iw = _max(_min(a[2], b[2]) - _max(a[0], b[0]), 0.0)
    ih = _max(_min(a[3], b[3]) - _max(a[1], b[1]), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = _max(a[2], b[2]) - _min(a[0], b[0])
    eh = _max(a[3], b[3]) - _min(a[1], b[1])
    encl = ew * eh
    loss += w_giou * (1.0 - (inter / union - _max(encl - union, 0.0) / encl))

    g_u = 1.0 / encl - inter / (union * union)
    g_i = 1.0 / union - g_u
    g_e = -union / (encl * encl)
    ga[0] = -g_u * (a[3] - a[1])
    ga[2] = g_u * (a[3] - a[1])
    ga[1] = -g_u * (a[2] - a[0])
    ga[3] = g_u * (a[2] - a[0])
    if iw > 0 and ih > 0:
        di_dw = g_i * ih
        di_dh = g_i * iw
        if a[2] <= b[2]:
            ga[2] += di_dw
        if a[0] >= b[0]:
            ga[0] -= di_dw
        if a[3] <= b[3]:
            ga[3] += di_dh
        if a[1] >= b[1]:
            ga[1] -= di_dh
    de_dw = g_e * eh
    de_dh = g_e * ew
    if a[2] >= b[2]:
        ga[2] += de_dw
    if a[0] <= b[0]:
        ga[0] -= de_dw
    if a[3] >= b[3]:
        ga[3] += de_dh
    if a[1] <= b[1]:
        ga[1] -= de_dh
    # loss uses (1 - giou); chain corner -> center
    gr[0] -= w_giou * (ga[0] + ga[2])
    gr[1] -= w_giou * (ga[1] + ga[3])
    gr[2] -= w_giou * 0.5 * (ga[2] - ga[0])
    gr[3] -= w_giou * 0.5 * (ga[3] - ga[1])
    return loss


def box_loss_grad(pred, tgt, double w_l1, double w_giou):
    """Summed box loss over aligned pairs and its gradient w.r.t. ``pred``."""
    cdef const double[:, ::1] p = np.ascontiguousarray(pred, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] t = np.ascontiguousarray(tgt, dtype=np.float64).reshape(-1, 4)
    cdef int n = p.shape[0]
    grad_arr = np.zeros((n, 4))
    cdef double[:, ::1] gr = grad_arr
    cdef int i
    cdef double loss = 0.0
    with nogil:
        for i in range(n):
            loss += _box_loss_row(&p[i, 0], &t[i, 0], w_l1, w_giou, &gr[i, 0])
    return loss, grad_arr


def padded_cost(probs, boxes, tgt_cls, tgt_boxes, double w_cls, double w_l1, double w_giou, bint focal=False):
    """N x N matching cost, target columns then background columns."""
    if focal:
        from . import _fallback
        return _fallback.padded_cost(probs, boxes, tgt_cls, tgt_boxes, w_cls, w_l1, w_giou, focal)
    cdef const double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef const cnp.int64_t[::1] tc = np.ascontiguousarray(tgt_cls, dtype=np.int64)
    cdef const double[:, ::1] tb = np.ascontiguousarray(tgt_boxes, dtype=np.float64).reshape(-1, 4)
    cdef int n = p.shape[0]
    cdef int t = tc.shape[0]
    cdef int bg = p.shape[1] - 1
    out_arr = np.empty((n, n))
    cdef double[:, ::1] out = out_arr
    cdef int i, j
    cdef double l1, g
    with nogil:
        for i in range(n):
            for j in range(t):
                l1 = (fabs(b[i, 0] - tb[j, 0]) + fabs(b[i, 1] - tb[j, 1])
                      + fabs(b[i, 2] - tb[j, 2]) + fabs(b[i, 3] - tb[j, 3]))
                g = _giou(b[i, 0] - 0.5 * b[i, 2], b[i, 1] - 0.5 * b[i, 3],
                          b[i, 0] + 0.5 * b[i, 2], b[i, 1] + 0.5 * b[i, 3],
                          tb[j, 0] - 0.5 * tb[j, 2], tb[j, 1] - 0.5 * tb[j, 3],
                          tb[j, 0] + 0.5 * tb[j, 2], tb[j, 1] + 0.5 * tb[j, 3])
                out[i, j] = -w_cls * p[i, tc[j]] + w_l1 * l1 + w_giou * (1.0 - g)
            for j in range(t, n):
                out[i, j] = -w_cls * p[i, bg]
    return out_arr


def set_loss(probs, boxes, assign, soft, tgt_boxes, double w_cls, double w_l1, double w_giou,
             bint use_cls=True, bint use_box=True):
    """Cross-entropy to soft targets (background for unassigned rows) plus
    box loss on assigned rows; returns (loss, grad_probs, grad_boxes)."""
    cdef const double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const cnp.int64_t[::1] a = np.ascontiguousarray(assign, dtype=np.int64)
    cdef const double[:, ::1] s = np.ascontiguousarray(soft, dtype=np.float64).reshape(-1, p.shape[1])
    cdef int n = p.shape[0]
    cdef int c = p.shape[1]
    gp_arr = np.zeros((n, c))
    cdef double[:, ::1] gp = gp_arr
    cdef int i, k, m = 0
    cdef double loss = 0.0, t, q
    with nogil:
        for i in range(n):
            if a[i] >= 0:
                m += 1
            if not use_cls or w_cls == 0:
                continue
            if a[i] < 0:
                q = p[i, c - 1]
                if q < 1e-12:
                    loss += -w_cls * log(1e-12)
                else:
                    loss += -w_cls * log(q)
                    gp[i, c - 1] = -w_cls / q
                continue
            for k in range(c):
                t = s[a[i], k]
                if t <= 0:
                    continue
                q = p[i, k]
                if q < 1e-12:
                    loss += -w_cls * t * log(1e-12)
                else:
                    loss += -w_cls * t * log(q)
                    gp[i, k] = -w_cls * t / q
    gb_arr = np.zeros((n, 4))
    if not use_box or m == 0:
        return loss, gp_arr, gb_arr
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef const double[:, ::1] tb = np.ascontiguousarray(tgt_boxes, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] gb = gb_arr
    with nogil:
        for i in range(n):
            if a[i] >= 0:
                loss += _box_loss_row(&b[i, 0], &tb[a[i], 0], w_l1, w_giou, &gb[i, 0])
    return loss, gp_arr, gb_arr


def solve(cost):
    """(assignment, total cost) of ``lsa_lex`` on a finite matrix.

    The total is accumulated in row order. Raises ValueError on NaN or inf.
    """
    cdef const double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef int i, j
    cdef double total = 0.0
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            if not isfinite(c[i, j]):
                raise ValueError("cost matrix contains NaN or infinite entries")
    assign = lsa_lex(cost)
    cdef cnp.int64_t[::1] av = assign
    for i in range(c.shape[0]):
        if av[i] >= 0:
            total += c[i, av[i]]
    return assign, total


def attention(scores, box, cx, cy, double scale, double prior):
    """softmax over cells of ``scale * scores - prior * ((dx/w)^2 + (dy/h)^2)``.

    ``scores`` is (B, Q, X) raw dot products, ``box`` (B, Q, 4) the boxes the
    prior is centred on, ``cx``/``cy`` the X cell centres.
    """
    cdef const double[:, :, ::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef const double[:, :, ::1] bx = np.ascontiguousarray(box, dtype=np.float64)
    cdef const double[::1] xs = np.ascontiguousarray(cx, dtype=np.float64)
    cdef const double[::1] ys = np.ascontiguousarray(cy, dtype=np.float64)
    cdef int nb = s.shape[0], nq = s.shape[1], nx = s.shape[2]
    out_arr = np.empty((nb, nq, nx))
    cdef double[:, :, ::1] out = out_arr
    cdef int b, q, x
    cdef double iw, ih, dx, dy, v, m, tot
    with nogil:
        for b in range(nb):
            for q in range(nq):
                iw = 1.0 / bx[b, q, 2]
                ih = 1.0 / bx[b, q, 3]
                m = -INFINITY
                for x in range(nx):
                    dx = (xs[x] - bx[b, q, 0]) * iw
                    dy = (ys[x] - bx[b, q, 1]) * ih
                    v = scale * s[b, q, x] - prior * (dx * dx + dy * dy)
                    out[b, q, x] = v
                    if v > m:
                        m = v
                tot = 0.0
                for x in range(nx):
                    v = exp(out[b, q, x] - m)
                    out[b, q, x] = v
                    tot += v
                for x in range(nx):
                    out[b, q, x] /= tot
    return out_arr


def attention_backward(att, datt, box, cx, cy, double prior):
    """Gradients of :func:`attention` given d loss / d att.

    Returns (d logits, d box), where the logits are the pre-softmax values
    and d box covers only the prior term.
    """
    cdef const double[:, :, ::1] a = np.ascontiguousarray(att, dtype=np.float64)
    cdef const double[:, :, ::1] g = np.ascontiguousarray(datt, dtype=np.float64)
    cdef const double[:, :, ::1] bx = np.ascontiguousarray(box, dtype=np.float64)
    cdef const double[::1] xs = np.ascontiguousarray(cx, dtype=np.float64)
    cdef const double[::1] ys = np.ascontiguousarray(cy, dtype=np.float64)
    cdef int nb = a.shape[0], nq = a.shape[1], nx = a.shape[2]
    ds_arr = np.empty((nb, nq, nx))
    db_arr = np.empty((nb, nq, 4))
    cdef double[:, :, ::1] ds = ds_arr
    cdef double[:, :, ::1] db = db_arr
    cdef int b, q, x
    cdef double dot, v, dx, dy, sx, sy, sxx, syy, w, h
    with nogil:
        for b in range(nb):
            for q in range(nq):
                dot = 0.0
                for x in range(nx):
                    dot += a[b, q, x] * g[b, q, x]
                sx = 0.0
                sy = 0.0
                sxx = 0.0
                syy = 0.0
                for x in range(nx):
                    v = a[b, q, x] * (g[b, q, x] - dot)
                    ds[b, q, x] = v
                    dx = xs[x] - bx[b, q, 0]
                    dy = ys[x] - bx[b, q, 1]
                    sx += v * dx
                    sy += v * dy
                    sxx += v * dx * dx
                    syy += v * dy * dy
                w = bx[b, q, 2]
                h = bx[b, q, 3]
                db[b, q, 0] = 2 * prior * sx / (w * w)
                db[b, q, 1] = 2 * prior * sy / (h * h)
                db[b, q, 2] = 2 * prior * sxx / (w * w * w)
                db[b, q, 3] = 2 * prior * syy / (h * h * h)
    return ds_arr, db_arr
