"""Reference numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
The two must agree exactly (not just approximately): the test-suite runs both
on the same inputs and compares with ``==``.
"""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x[N,C,H,W]`` into ``cols[N, C*kh*kw, Ho*Wo]``."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            cols[:, :, i, j] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    n, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def _iou_one_to_many(box, boxes):
    ix1 = np.maximum(box[0], boxes[:, 0])
    iy1 = np.maximum(box[1], boxes[:, 1])
    ix2 = np.minimum(box[2], boxes[:, 2])
    iy2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return iou


def nms(boxes, iou_thresh):
    """Greedy suppression over corner boxes already sorted by priority.

    Returns the indices of kept boxes in input order.
    """
    m = boxes.shape[0]
    suppressed = np.zeros(m, dtype=bool)
    keep = []
    for i in range(m):
        if suppressed[i]:
            continue
        keep.append(i)
        if i + 1 < m:
            rest = boxes[i + 1:]
            iou = _iou_one_to_many(boxes[i], rest)
            suppressed[i + 1:] |= iou > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def greedy_match(iou, thresh):
    """Match score-sorted detections (rows) to ground truths (columns).

    Each detection takes the unmatched ground truth of highest IoU, provided
    that IoU is at least ``thresh``; ties go to the lower column index.
    Returns a boolean true-positive flag per detection.
    """
    n_det, n_gt = iou.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
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
            taken[best] = True
            tp[d] = True
    return tp


def swap_refine(adj, labels, n_parts):
    """Pairwise-swap local search minimising the cut weight of a partition.

    ``labels[i]`` is the part of node ``i``; sizes are preserved because only
    swaps between different parts are applied. At each step the swap with
    the most negative cut change is taken (first in row-major ``(i, j)``
    order on ties) until no swap improves the cut.
    """
    labels = np.array(labels, dtype=np.int64)
    n = adj.shape[0]
    # conn[i, p]: total weight from node i into part p
    onehot = np.zeros((n, n_parts), dtype=np.float64)
    onehot[np.arange(n), labels] = 1.0
    conn = adj @ onehot
    idx = np.arange(n)
    while True:
        own = conn[idx, labels]
        # moving i into part labels[j] and j into part labels[i]
        into_j = conn[:, labels]  # [i, j] -> conn[i, labels[j]]
        delta = (own[:, None] - into_j) + (own[None, :] - into_j.T) + 2.0 * adj
        delta[labels[:, None] == labels[None, :]] = np.inf
        delta = np.triu(delta, 1) + np.tril(np.full((n, n), np.inf))
        flat = int(np.argmin(delta))
        i, j = divmod(flat, n)
        if not delta[i, j] < -1e-9:
            break
        a, b = labels[i], labels[j]
        conn[:, a] += adj[:, j] - adj[:, i]
        conn[:, b] += adj[:, i] - adj[:, j]
        labels[i], labels[j] = b, a
    return labels
