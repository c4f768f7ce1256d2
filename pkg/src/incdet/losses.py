"""Dense supervision targets and the differentiable pieces shared by losses."""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T

diagnostics = Counter()


def _overlap(pred, target):
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    px, py, pw, ph = (pred[..., i] for i in range(4))
    tx, ty, tw, th = (target[..., i] for i in range(4))
    p1 = (px - pw * 0.5, py - ph * 0.5, px + pw * 0.5, py + ph * 0.5)
    t1 = (tx - tw * 0.5, ty - th * 0.5, tx + tw * 0.5, ty + th * 0.5)
    iw = T.clamp_min(T.minimum(p1[2], t1[2]) - T.maximum(p1[0], t1[0]), 0.0)
    ih = T.clamp_min(T.minimum(p1[3], t1[3]) - T.maximum(p1[1], t1[1]), 0.0)
    inter = iw * ih
    # areas from the same corners as the overlap, so identical boxes give IoU exactly 1
    area_p = (p1[2] - p1[0]) * (p1[3] - p1[1])
    area_t = (t1[2] - t1[0]) * (t1[3] - t1[1])
    degenerate = (area_p.data <= 0) | (area_t.data <= 0)
    if degenerate.any():
        diagnostics["degenerate_box"] += int(degenerate.sum())
    union = area_p + area_t - inter + degenerate.astype(np.float64)
    return inter, union, degenerate, p1, t1


def box_iou(pred, target):
    """Elementwise IoU between ``(cx,cy,w,h)`` boxes along the last axis.

    ``pred`` is a Tensor ``[...,4]``; ``target`` a Tensor or array of the same
    shape. Pairs where either box has zero area get IoU 0 and are counted in
    ``diagnostics['degenerate_box']``.
    """
    inter, union, degenerate, _, _ = _overlap(pred, target)
    iou = inter / union
    if degenerate.any():
        iou = iou * (~degenerate).astype(np.float64)
    return iou


def box_giou(pred, target):
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    inter, union, degenerate, p1, t1 = _overlap(pred, target)
    ew = T.maximum(p1[2], t1[2]) - T.minimum(p1[0], t1[0])
    eh = T.maximum(p1[3], t1[3]) - T.minimum(p1[1], t1[1])
    enclose = ew * eh + degenerate.astype(np.float64)
    giou = inter / union - (enclose - union) / enclose
    if degenerate.any():
        giou = giou * (~degenerate).astype(np.float64)
    return giou


def cell_of(box, grid):
    """Row/column of the grid cell containing the box centre."""
    cx, cy = box[0], box[1]
    return min(int(cy * grid), grid - 1), min(int(cx * grid), grid - 1)


@dataclass
class DenseTargets:
    """Per-batch classification targets over ``[N, C, G, G]``.

    ``target`` holds BCE targets, ``mask`` selects which entries get BCE at
    all, and ``boxes`` lists ``(n, row, col, box, weight)`` for the box loss.
    """

    class_ids: list
    target: np.ndarray
    mask: np.ndarray
    boxes: list
    n_images: int

    @classmethod
    def empty(cls, n, class_ids, grid):
        c = len(class_ids)
        return cls(list(class_ids), np.zeros((n, c, grid, grid)), np.ones((n, c, grid, grid)), [], n)

    def index(self, class_id):
        return self.class_ids.index(int(class_id))

    def add_positive(self, n, box, class_id, weight=1.0):
        g = self.target.shape[-1]
        r, c = cell_of(box, g)
        self.target[n, self.index(class_id), r, c] = 1.0
        self.boxes.append((n, r, c, tuple(box), weight))

    def ignore(self, n, box, class_id):
        r, c = cell_of(box, self.target.shape[-1])
        self.mask[n, self.index(class_id), r, c] = 0.0


def gt_targets(annotations, class_ids, grid):
    """Targets from ground-truth annotation lists (one list per image)."""
    t = DenseTargets.empty(len(annotations), class_ids, grid)
    for n, anns in enumerate(annotations):
        for box, cid in anns:
            if int(cid) in t.class_ids:
                t.add_positive(n, box, cid)
    return t


def classification_bce(logits, targets):
    """Masked BCE summed over entries, averaged over images."""
    per = T.bce_with_logits(logits, targets.target)
    return T.tsum(per * targets.mask) * (1.0 / targets.n_images)


def box_loss(boxes, targets):
    """Weighted ``1 - IoU`` at the positive cells, averaged over images.

    ``boxes`` is the decoded ``[N,4,G,G]`` prediction tensor.
    """
    if not targets.boxes:
        return T.Tensor(0.0)
    n_idx = np.array([b[0] for b in targets.boxes])
    r_idx = np.array([b[1] for b in targets.boxes])
    c_idx = np.array([b[2] for b in targets.boxes])
    gt = np.array([b[3] for b in targets.boxes], dtype=np.float64)
    w = np.array([b[4] for b in targets.boxes], dtype=np.float64)
    pred = T.transpose(boxes, (0, 2, 3, 1))[n_idx, r_idx, c_idx]  # [K,4]
    iou = box_iou(pred, gt)
    return T.tsum((1.0 - iou) * w) * (1.0 / targets.n_images)
