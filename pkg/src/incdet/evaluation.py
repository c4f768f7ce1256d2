"""Detection metrics: IoU, COCO-style AP/mAP and forgetting gaps."""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

diagnostics = Counter()


def iou(box_a, box_b):
    """IoU of two corner-form boxes ``(x1, y1, x2, y2)``.

    Zero-area input yields 0 and bumps ``diagnostics['degenerate_iou']``.
    """
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        diagnostics["degenerate_iou"] += 1
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a, b):
    """Pairwise IoU between corner boxes ``a[M,4]`` and ``b[K,4]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _corners(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP from score-ordered true-positive flags."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros_like(RECALL_POINTS)
    valid = idx < recall.size
    q[valid] = envelope[idx[valid]]
    return float(q.mean())


def average_precision(detections, gts, iou_thresh):
    """AP for one class.

    ``detections``: iterable of ``(image_id, score, box)``; ``gts``: iterable of
    ``(image_id, box)``; boxes are ``(cx, cy, w, h)``. A class with no ground
    truth is absent: AP is 1.0 if it also has no detections, NaN otherwise, and
    either way it is left out of every mean.
    """
    dets = sorted(detections, key=lambda d: -d[1])  # stable: ties keep input order
    gt_by_image = {}
    for image_id, box in gts:
        gt_by_image.setdefault(image_id, []).append(_corners(box))
    n_gt = sum(len(v) for v in gt_by_image.values())
    if n_gt == 0:
        return 1.0 if not dets else float("nan")
    tp = _match(dets, gt_by_image, iou_thresh)
    return interpolated_ap(tp, n_gt)


def _match(dets, gt_by_image, iou_thresh):
    tp = np.zeros(len(dets), dtype=bool)
    per_image = {}
    for k, (image_id, _, box) in enumerate(dets):
        per_image.setdefault(image_id, []).append((k, _corners(box)))
    for image_id, items in per_image.items():
        gt = gt_by_image.get(image_id)
        if not gt:
            continue
        ious = iou_matrix([b for _, b in items], gt)
        flags = _kernels.greedy_match(np.ascontiguousarray(ious), iou_thresh)
        for (k, _), f in zip(items, flags):
            tp[k] = f
    return tp


@dataclass
class EvalResult:
    per_class: dict  # class_id -> list of AP at each IOU_THRESHOLDS entry
    n_gt: dict  # class_id -> ground-truth count
    groups: dict = field(default_factory=dict)  # name -> list of class ids

    @property
    def classes(self):
        return sorted(c for c in self.per_class if self.n_gt.get(c, 0) > 0)

    def class_map(self, c):
        return float(np.mean(self.per_class[c]))

    def _mean(self, classes, k=None):
        vals = []
        for c in classes:
            aps = self.per_class.get(c)
            if aps is None or self.n_gt.get(c, 0) == 0:
                continue
            vals.append(np.mean(aps) if k is None else aps[k])
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def map(self):
        return self._mean(self.classes)

    @property
    def ap50(self):
        return self._mean(self.classes, 0)

    @property
    def ap75(self):
        return self._mean(self.classes, 5)

    def group_map(self, name):
        return self._mean(self.groups[name])

    def to_dict(self):
        return {
            "mAP": self.map, "AP50": self.ap50, "AP75": self.ap75,
            "per_class": {str(c): list(map(float, v)) for c, v in sorted(self.per_class.items())},
            "n_gt": {str(c): int(v) for c, v in sorted(self.n_gt.items())},
            "groups": {k: {"classes": v, "mAP": self.group_map(k)} for k, v in self.groups.items()},
        }


def evaluate(predictions, dataset, class_ids, groups=None):
    """Score ``predictions`` (list of Detection lists, aligned with ``dataset``)."""
    class_ids = [int(c) for c in class_ids]
    per_class, n_gt = {}, {}
    for c in class_ids:
        dets = [(img.image_id, d.score, d.box)
                for img, ds in zip(dataset, predictions) for d in ds if d.class_id == c]
        gts = [(img.image_id, box) for img in dataset for box, cid in img.annotations if cid == c]
        per_class[c] = [average_precision(dets, gts, t) for t in IOU_THRESHOLDS]
        n_gt[c] = len(gts)
    return EvalResult(per_class, n_gt, dict(groups or {}))


def gap_metrics(ap_incremental, ap_joint):
    """``(AbsGap, RelGap)`` of an incremental run against joint training."""
    if ap_joint <= 0:
        raise ValueError(f"joint AP must be positive, got {ap_joint}")
    abs_gap = ap_joint - ap_incremental
    return abs_gap, abs_gap / ap_joint


def format_gap(abs_gap, rel_gap):
    """Table rounding: AbsGap to 0.1, RelGap to 0.1%."""
    return f"{abs_gap:.1f}", f"{100 * rel_gap:.1f}%"


def format_table(rows, columns):
    """Fixed-width text table; floats in [0,1] are shown x100 to 0.1."""
    def cell(v):
        if isinstance(v, float):
            return "-" if np.isnan(v) else f"{100 * v:.1f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
