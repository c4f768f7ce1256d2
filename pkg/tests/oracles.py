"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools

import numpy as np

from incdet.cpr import weighted_objective
from incdet.evaluation import RECALL_POINTS
from incdet.loco import cut_weight


def corner_iou(a, b):
    """IoU of two ``(cx, cy, w, h)`` boxes, computed from scratch."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def brute_ap(dets, gts, thresh):
    """AP by explicit greedy matching and a cut-by-cut PR curve.

    ``dets``: ``(image_id, score, box)``; ``gts``: ``(image_id, box)``. Each
    detection, in descending score order (ties keep input order), takes the
    unused same-image GT of highest IoU if that IoU reaches ``thresh``; the
    first such GT wins IoU ties.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k][1])
    used = set()
    tp = []
    for k in order:
        image_id, _, box = dets[k]
        best_j, best = None, -1.0
        for j, (gid, gbox) in enumerate(gts):
            if gid != image_id or j in used:
                continue
            o = corner_iou(box, gbox)
            if o >= thresh and o > best:
                best_j, best = j, o
        if best_j is not None:
            used.add(best_j)
        tp.append(best_j is not None)
    precision, recall = [], []
    for k in range(1, len(tp) + 1):
        hits = float(sum(tp[:k]))
        precision.append(hits / k)
        recall.append(hits / len(gts))
    points = [max([p for p, r in zip(precision, recall) if r >= level], default=0.0) for level in RECALL_POINTS]
    return float(np.mean(points))


def brute_cooccurrence(dataset):
    cats = sorted(c["id"] for c in dataset["categories"])
    per = {}
    for a in dataset["annotations"]:
        per.setdefault(a["image_id"], set()).add(a["category_id"])
    A = np.zeros((len(cats), len(cats)), dtype=np.int64)
    for i, ci in enumerate(cats):
        for j, cj in enumerate(cats):
            if i != j:
                A[i, j] = sum(1 for s in per.values() if ci in s and cj in s)
    return A


def brute_min_cut(A, sizes):
    """Minimum cut weight over every assignment with exactly ``sizes``."""
    n = len(A)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        labels = np.empty(n, dtype=np.int64)
        start = 0
        for s, k in enumerate(sizes):
            labels[list(perm[start:start + k])] = s
            start += k
        best = min(best, cut_weight(A, labels))
    return best


def brute_weighted_kmeans(points, weights, k):
    """Optimal weighted K-Means objective over every non-empty assignment."""
    best = np.inf
    for assign in itertools.product(range(k), repeat=len(points)):
        assign = np.array(assign)
        if len(set(assign.tolist())) < k:
            continue
        cents = np.array([np.average(points[assign == j], axis=0, weights=weights[assign == j])
                          for j in range(k)])
        best = min(best, weighted_objective(points, weights, cents, assign))
    return best
