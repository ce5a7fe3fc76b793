"""Pure numpy/Python implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``DEBUS_PURE_PYTHON=1`` is set. Signatures match the extension exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, padding):
    """(B, C, H, W) -> (B, C*kh*kw, Ho*Wo) patch matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add patch columns back to an image."""
    b, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def linear_sum_assignment(cost):
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^2 m). Returns an int64 array ``cols`` with ``cols[i]`` the column
    assigned to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: 1-based row matched to column j
    way = [0] * (m + 1)
    rows = cost.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = rows[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
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
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def greedy_match(iou, threshold):
    """Greedy detection-to-ground-truth matching.

    ``iou`` is (P, G) with predictions already sorted by descending score.
    Each prediction takes the unmatched ground truth with the highest IoU
    >= ``threshold`` (lowest index on ties). Returns int64 ``matched_gt``
    of length P, -1 for false positives.
    """
    iou = np.asarray(iou, dtype=np.float64)
    npred, ngt = iou.shape
    taken = [False] * ngt
    out = np.full(npred, -1, dtype=np.int64)
    rows = iou.tolist()
    for d in range(npred):
        best = -1
        best_iou = threshold
        row = rows[d]
        for g in range(ngt):
            if taken[g]:
                continue
            val = row[g]
            if val >= best_iou and (best < 0 or val > best_iou):
                best = g
                best_iou = val
        if best >= 0:
            taken[best] = True
            out[d] = best
    return out
