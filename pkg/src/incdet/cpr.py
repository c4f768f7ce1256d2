"""Confidence-aware pseudo-labels and clustered unknown supervision.

Old-class objects that are unlabelled in the current stage are supervised by
the previous model's detections, each carrying its raw score as a soft target.
Unlabelled foreground that matches no known class is discovered against a
general vocabulary, clustered in text-embedding space with frequency weights,
and relabelled with the resulting unknown super-categories.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .detector import TextPrototypes, cxcywh_to_xyxy, detect_batch
from .evaluation import iou_matrix
from .rng import substream

log = logging.getLogger(__name__)

GENERAL_VOCAB_BASE = 1000
UNKNOWN_BASE = 2000
P_MIN = 1e-12

diagnostics = Counter()


@dataclass
class CprConfig:
    gamma: float = 2.0
    delta: float = 1.0
    lam: float = 0.1
    floor_thresh: float = 0.05
    kmeans_k: int = 4
    iou_gate: float = 0.5
    discovery_thresh: float = 0.1

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0 or self.lam < 0:
            raise ValueError("gamma, delta and lambda must be non-negative")
        if not 0.0 <= self.floor_thresh < 1.0:
            raise ValueError("floor_thresh must lie in [0, 1)")
        if self.kmeans_k < 1:
            raise ValueError("kmeans_k must be positive")


@dataclass
class PseudoLabel:
    box: tuple
    class_id: int
    s: float

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"pseudo-label confidence {self.s} outside [0, 1]")


# ------------------------------------------------------------- old classes


def generate_pseudo_labels(old_model, image, seen_classes, cfg):
    """Old-model detections on ``seen_classes`` above the floor, score kept as ``s``."""
    return generate_pseudo_labels_batch(old_model, np.asarray(image)[None], seen_classes, cfg)[0]


def generate_pseudo_labels_batch(old_model, images, seen_classes, cfg, nms_iou=0.5):
    if not seen_classes:
        return [[] for _ in range(len(images))]
    vocab = old_model.vocab(sorted(seen_classes))
    out = []
    for dets in detect_batch(old_model, images, vocab, max(cfg.floor_thresh, 1e-6), nms_iou):
        out.append([PseudoLabel(d.box, d.class_id, d.score) for d in dets if d.score > cfg.floor_thresh])
    return out


def entropy(dist):
    """Shannon entropy (nats) of a probability vector."""
    p = np.asarray(dist, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def enhanced_pseudo_cls_loss(p_t, s, class_dist, cfg):
    """``-|s - p|^gamma log p + lam (1 - s)^delta H(dist)`` for one pseudo-label.

    Plain floats in, float out. ``p_t`` below 1e-12 is clamped and counted in
    ``diagnostics['clamped_p']``.
    """
    p_t = float(p_t)
    if p_t < P_MIN:
        diagnostics["clamped_p"] += 1
        p_t = P_MIN
    first = -abs(s - p_t) ** cfg.gamma * np.log(p_t)
    second = cfg.lam * (1.0 - s) ** cfg.delta * entropy(class_dist)
    return first + second


def enhanced_pseudo_cls_loss_tensor(p_t, s, class_dist, cfg):
    """Vectorised, differentiable form summed over K pseudo-labels.

    ``p_t`` is a Tensor ``[K]``, ``s`` an array ``[K]``, ``class_dist`` a
    Tensor ``[K, C]`` of probabilities.
    """
    s = np.asarray(s, dtype=np.float64)
    low = p_t.data < P_MIN
    if low.any():
        diagnostics["clamped_p"] += int(low.sum())
        p_t = T.maximum(p_t, P_MIN)
    first = -(T.power(T.tabs(s - p_t), cfg.gamma) if cfg.gamma != 0 else T.Tensor(np.ones_like(s))) * T.log(p_t)
    q = T.maximum(class_dist, P_MIN)
    h = -T.tsum(class_dist * T.log(q), axis=-1)
    second = h * (cfg.lam * (1.0 - s) ** cfg.delta)
    return T.tsum(first + second)


# ---------------------------------------------------------- unknown objects


def build_general_vocabulary(n_common, n_super, rng_seed):
    """Seeded stand-in for a general vocabulary: common entries then super-categories.

    Ids start at ``GENERAL_VOCAB_BASE`` so they never collide with task classes.
    """
    if n_common < 0 or n_super < 0:
        raise ValueError("vocabulary sizes must be non-negative")
    ids = list(range(GENERAL_VOCAB_BASE, GENERAL_VOCAB_BASE + n_common + n_super))
    if not ids:
        return TextPrototypes([], np.zeros((0, 0)))
    return TextPrototypes.synthetic(ids, 16, rng_seed, stream="general-vocab")


def discover_unknown_foreground(model, vocab, image, gt_annotations, iou_gate, score_thresh=0.1):
    """Detections against ``vocab`` that overlap no known box by ``iou_gate`` or more.

    Returns ``(box, vocab_category, score)`` triples.
    """
    return discover_unknown_batch(model, vocab, np.asarray(image)[None], [gt_annotations],
                                  iou_gate, score_thresh)[0]


def discover_unknown_batch(model, vocab, images, known_boxes, iou_gate, score_thresh=0.1, nms_iou=0.5):
    """Batched discovery; ``known_boxes`` holds one list of cxcywh boxes per image.

    Detections are first reduced class-agnostically so each object is
    reported once, under its best-scoring vocabulary entry.
    """
    if not 0.0 < iou_gate < 1.0:
        raise ValueError("iou_gate must lie in (0, 1)")
    out = []
    for dets, known in zip(detect_batch(model, images, vocab, score_thresh, nms_iou), known_boxes):
        known = [k[0] if len(k) == 2 else k for k in known]  # accept (box, class) pairs
        kb = cxcywh_to_xyxy(np.array(known, dtype=np.float64).reshape(-1, 4))
        kept = []
        if dets:
            corners = cxcywh_to_xyxy(np.array([d.box for d in dets]))
            for i in _kernels.nms(np.ascontiguousarray(corners), nms_iou):
                d = dets[i]
                if len(kb) and iou_matrix(corners[i], kb).max() >= iou_gate:
                    continue
                kept.append((d.box, d.class_id, d.score))
        out.append(kept)
    return out


@dataclass
class UnknownSuperCategories:
    centroids: np.ndarray  # [K, D]
    members: dict  # vocab category -> centroid index
    frequencies: dict  # vocab category -> count
    history: list = field(default_factory=list)  # weighted objective per iteration

    def __len__(self):
        return len(self.centroids)

    @property
    def ids(self):
        return [UNKNOWN_BASE + k for k in range(len(self))]

    def prototypes(self):
        return TextPrototypes(self.ids, self.centroids)


def weighted_objective(points, weights, centroids, assign):
    d = points - centroids[assign]
    return float((weights * (d * d).sum(axis=1)).sum())


def _assign(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1), d2


def _farthest_point_init(points, weights, k, rng, sample=False):
    """Weighted farthest-point seeding; ``sample`` draws proportionally to the
    weighted squared distance instead (k-means++) for restart diversity."""
    first = int(rng.choice(len(points), p=weights / weights.sum()))
    centers = [points[first]]
    for _ in range(1, k):
        _, d2 = _assign(points, np.array(centers))
        score = weights * d2.min(axis=1)
        if sample and score.sum() > 0:
            centers.append(points[int(rng.choice(len(points), p=score / score.sum()))])
        else:
            centers.append(points[int(np.argmax(score))])
    return np.array(centers)


def weighted_kmeans(points, weights, k, rng, max_iter=100, tol=1e-9, init=None):
    """Lloyd iterations with frequency weights, then single-point transfers.

    Returns ``(centroids, assignment, objective_history)``; the history has one
    entry after each assignment step and never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    centroids = _farthest_point_init(points, weights, k, rng) if init is None else np.array(init, dtype=np.float64)
    history = []
    assign = None
    for _ in range(max_iter):
        assign, _ = _assign(points, centroids)
        history.append(weighted_objective(points, weights, centroids, assign))
        new = centroids.copy()
        for j in range(k):
            m = assign == j
            if m.any():
                new[j] = (weights[m, None] * points[m]).sum(axis=0) / weights[m].sum()
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    assign, _ = _assign(points, centroids)
    history.append(weighted_objective(points, weights, centroids, assign))
    centroids, assign = _transfer_refine(points, weights, centroids, assign, history)
    return centroids, assign, history


def _transfer_refine(points, weights, centroids, assign, history):
    """Single-point transfers that strictly lower the objective.

    Lloyd stops at any fixed point; moving point i of weight w from cluster a
    (weight W_a) to b changes the objective by
    w W_b/(W_b+w) |x-c_b|^2 - w W_a/(W_a-w) |x-c_a|^2, which Lloyd ignores.
    """
    k = len(centroids)
    assign = assign.copy()
    mass = np.array([weights[assign == j].sum() for j in range(k)])
    for j in range(k):
        if mass[j] > 0:
            centroids[j] = (weights[assign == j, None] * points[assign == j]).sum(axis=0) / mass[j]
    for _ in range(100 * len(points)):
        moved = False
        for i in range(len(points)):
            a, w = assign[i], weights[i]
            if mass[a] - w <= 0:
                continue
            d2 = ((points[i] - centroids) ** 2).sum(axis=1)
            gain = w * mass[a] / (mass[a] - w) * d2[a]
            cost = np.where(np.arange(k) == a, np.inf, w * mass / (mass + w) * d2)
            b = int(np.argmin(cost))
            if cost[b] < gain * (1 - 1e-12):
                centroids[a] = (mass[a] * centroids[a] - w * points[i]) / (mass[a] - w)
                centroids[b] = (mass[b] * centroids[b] + w * points[i]) / (mass[b] + w)
                mass[a] -= w
                mass[b] += w
                assign[i] = b
                moved = True
        if not moved:
            break
        history.append(weighted_objective(points, weights, centroids, assign))
    return centroids, assign


def cluster_unknown_categories(labels, frequencies, vocab_embeddings, k, rng_seed, n_init=8):
    """Frequency-weighted K-Means over the text embeddings of ``labels``.

    ``vocab_embeddings`` maps vocab category -> embedding (or is a
    TextPrototypes). The best of ``n_init`` seeded runs is kept; the first run
    starts from weighted farthest-point seeding, later ones from k-means++.
    """
    labels = sorted({int(c) for c in labels})
    if not labels:
        return UnknownSuperCategories(np.zeros((0, 0)), {}, {})
    if isinstance(vocab_embeddings, TextPrototypes):
        vocab_embeddings = dict(zip(vocab_embeddings.class_ids, vocab_embeddings.embeddings))
    if k > len(labels):
        raise ValueError(f"K={k} exceeds the number of discovered categories ({len(labels)})")
    points = np.array([vocab_embeddings[c] for c in labels], dtype=np.float64)
    weights = np.array([float(frequencies[c]) for c in labels])
    rng = substream(rng_seed, "kmeans")
    best = None
    for run in range(max(1, n_init)):
        init = _farthest_point_init(points, weights, k, rng, sample=run > 0)
        cents, assign, hist = weighted_kmeans(points, weights, k, rng, init=init)
        if best is None or hist[-1] < best[2][-1] - 1e-12:
            best = (cents, assign, hist)
    cents, assign, hist = best
    return UnknownSuperCategories(cents, {c: int(a) for c, a in zip(labels, assign)},
                                  {c: int(frequencies[c]) for c in labels}, hist)


def relabel_with_super_categories(found, unknown):
    """Swap each discovered vocab label for its super-category id."""
    if not found:
        return []
    if not len(unknown):
        raise ValueError("no super-categories to relabel with")
    return [PseudoLabel(tuple(box), UNKNOWN_BASE + unknown.members[int(cat)], float(score))
            for box, cat, score in found]


def pseudo_labels_to_coco(labels_by_image, image_size=32):
    """COCO-style dict with an extra ``confidence`` field per annotation."""
    images, anns = [], []
    ann_id = 1
    cats = set()
    for image_id in sorted(labels_by_image):
        images.append({"id": int(image_id), "file_name": f"{image_id:06d}.png",
                       "width": image_size, "height": image_size})
        for pl in labels_by_image[image_id]:
            cx, cy, w, h = pl.box
            anns.append({"id": ann_id, "image_id": int(image_id), "category_id": int(pl.class_id),
                         "bbox": [(cx - w / 2) * image_size, (cy - h / 2) * image_size,
                                  w * image_size, h * image_size],
                         "confidence": float(pl.s), "iscrowd": 0})
            cats.add(int(pl.class_id))
            ann_id += 1
    return {"images": images, "annotations": anns,
            "categories": [{"id": c, "name": f"class_{c}"} for c in sorted(cats)]}


def pseudo_labels_from_coco(coco):
    sizes = {im["id"]: im.get("width", 32) for im in coco["images"]}
    out = {im["id"]: [] for im in coco["images"]}
    for a in coco["annotations"]:
        size = sizes[a["image_id"]]
        x, y, w, h = a["bbox"]
        out[a["image_id"]].append(PseudoLabel(((x + w / 2) / size, (y + h / 2) / size, w / size, h / size),
                                              int(a["category_id"]), float(a["confidence"])))
    return out
