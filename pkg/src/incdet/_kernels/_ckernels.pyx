# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of ``_pykernels``. Same signatures, bit-identical results.

Accumulation orders follow the numpy reference on purpose; do not build with
``-ffast-math``.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, y, xx, row
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(wo):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            cols[b, row, oy * wo + ox] = x[b, ch, y, xx]
    return out


def col2im(cols_in, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef double[:, :, ::1] cols = np.ascontiguousarray(
        cols_in, dtype=np.float64).reshape(n, c * kh * kw, ho * wo)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, y, xx, row
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(wo):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            o[b, ch, y, xx] += cols[b, row, oy * wo + ox]
    return out


cdef inline double _iou(double[:, ::1] bx, Py_ssize_t a, Py_ssize_t b) nogil:
    cdef double ix1 = bx[a, 0] if bx[a, 0] > bx[b, 0] else bx[b, 0]
    cdef double iy1 = bx[a, 1] if bx[a, 1] > bx[b, 1] else bx[b, 1]
    cdef double ix2 = bx[a, 2] if bx[a, 2] < bx[b, 2] else bx[b, 2]
    cdef double iy2 = bx[a, 3] if bx[a, 3] < bx[b, 3] else bx[b, 3]
    cdef double iw = ix2 - ix1
    cdef double ih = iy2 - iy1
    if iw < 0.0:
        iw = 0.0
    if ih < 0.0:
        ih = 0.0
    cdef double inter = iw * ih
    cdef double area_a = (bx[a, 2] - bx[a, 0]) * (bx[a, 3] - bx[a, 1])
    cdef double area_b = (bx[b, 2] - bx[b, 0]) * (bx[b, 3] - bx[b, 1])
    cdef double union = area_a + area_b - inter
    if union > 0.0:
        return inter / union
    return 0.0


def nms(boxes_in, double iou_thresh):
    cdef double[:, ::1] boxes = np.ascontiguousarray(boxes_in, dtype=np.float64)
    cdef Py_ssize_t m = boxes.shape[0], i, k
    sup = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = sup
    keep = []
    for i in range(m):
        if suppressed[i]:
            continue
        keep.append(i)
        for k in range(i + 1, m):
            if not suppressed[k] and _iou(boxes, i, k) > iou_thresh:
                suppressed[k] = 1
    return np.asarray(keep, dtype=np.int64)


def greedy_match(iou_in, double thresh):
    cdef double[:, ::1] iou = np.ascontiguousarray(iou_in, dtype=np.float64)
    cdef Py_ssize_t n_det = iou.shape[0], n_gt = iou.shape[1], d, g, best
    cdef double best_iou, v
    taken_arr = np.zeros(n_gt, dtype=np.uint8)
    tp_arr = np.zeros(n_det, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    cdef unsigned char[::1] tp = tp_arr
    for d in range(n_det):
        best = -1
        best_iou = thresh
        for g in range(n_gt):
            if taken[g]:
                continue
            v = iou[d, g]
            if v >= best_iou and (best < 0 or v > best_iou):
                best = g
                best_iou = v
        if best >= 0:
            taken[best] = 1
            tp[d] = 1
    return tp_arr.astype(bool)


def swap_refine(adj_in, labels_in, int n_parts):
    cdef double[:, ::1] adj = np.ascontiguousarray(adj_in, dtype=np.float64)
    labels_arr = np.array(labels_in, dtype=np.int64)
    cdef long long[::1] labels = labels_arr
    cdef Py_ssize_t n = adj.shape[0], i, j, k, bi, bj
    cdef long long a, b
    conn_arr = np.zeros((n, n_parts), dtype=np.float64)
    cdef double[:, ::1] conn = conn_arr
    # same summation order as the numpy reference
    onehot = np.zeros((n, n_parts), dtype=np.float64)
    onehot[np.arange(n), labels_arr] = 1.0
    conn_arr[...] = np.asarray(adj_in, dtype=np.float64) @ onehot
    cdef double best, dlt
    while True:
        best = np.inf
        bi = -1
        bj = -1
        for i in range(n):
            for j in range(i + 1, n):
                if labels[i] == labels[j]:
                    continue
                dlt = ((conn[i, labels[i]] - conn[i, labels[j]])
                       + (conn[j, labels[j]] - conn[j, labels[i]])
                       + 2.0 * adj[i, j])
                if dlt < best:
                    best = dlt
                    bi = i
                    bj = j
        if bi < 0 or not best < -1e-9:
            break
        a = labels[bi]
        b = labels[bj]
        for k in range(n):
            conn[k, a] += adj[k, bj] - adj[k, bi]
            conn[k, b] += adj[k, bi] - adj[k, bj]
        labels[bi] = b
        labels[bj] = a
    return labels_arr
