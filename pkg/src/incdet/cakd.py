"""Dual-teacher feature distillation through the teachers' own heads.

The student's neck map is pushed through each frozen teacher's
classification and regression heads. The old teacher anchors old classes and
the current-stage teacher anchors new ones; each teacher weights locations
by its own peak class confidence, so background contributes little.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .detector import DetectorModel, encode_image, region_text_scores, regress_boxes
from .losses import box_giou, box_iou
from .tensor import DimensionError


@dataclass
class KdConfig:
    alpha: float = 1.0
    beta: float = 1.0
    reduction: str = "sum"  # "sum" over locations, or "mean"
    iou_loss: str = "iou"  # "iou" or "giou"
    use_old: bool = True
    use_current: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.iou_loss not in ("iou", "giou"):
            raise ValueError(f"unknown IoU loss {self.iou_loss!r}")


@dataclass
class TeacherPair:
    old_teacher: DetectorModel
    old_classes: list
    current_teacher: DetectorModel
    current_classes: list

    def __post_init__(self):
        if set(self.old_classes or []) & set(self.current_classes or []):
            raise ValueError("teacher class sets must be disjoint")
        for m in (self.old_teacher, self.current_teacher):
            if m is not None:
                m.freeze()


def cross_head_features(student_neck, teacher):
    """Teacher head outputs ``(E, B)`` on the student's neck features."""
    d = teacher.layer("head.cls").c_in
    if student_neck.shape[-3] != d:
        raise DimensionError(f"student neck has {student_neck.shape[-3]} channels, teacher head expects {d}")
    return teacher.embed_head(student_neck), regress_boxes(student_neck, teacher)


def focal_weight(teacher_logits):
    """``sigmoid(max_j logit_j)`` per location; reduces the class axis (-3)."""
    logits = np.asarray(teacher_logits.data if isinstance(teacher_logits, T.Tensor) else teacher_logits)
    if logits.shape[-3] < 1:
        raise ValueError("focal weight needs at least one class")
    return T._sigmoid(logits.max(axis=-3))


def _reduce(per_loc, w, reduction):
    # per_loc and w are [G,G] or [N,G,G]; a leading batch axis is averaged
    total = T.tsum(per_loc * w)
    if reduction == "mean":
        total = total * (1.0 / (w.shape[-1] * w.shape[-2]))
    if per_loc.ndim == 3:
        total = total * (1.0 / per_loc.shape[0])
    return total


def cls_kd_loss(e_teacher, e_student, w, reduction="sum"):
    """``sum_p ||E_t(p) - E_s(p)||^2 w(p)``; embeddings ``[D,G,G]`` or ``[N,D,G,G]``."""
    e_teacher = T.as_tensor(e_teacher)
    e_student = T.as_tensor(e_student)
    if e_teacher.shape != e_student.shape:
        raise DimensionError(f"embedding shapes differ: {e_teacher.shape} vs {e_student.shape}")
    diff = e_teacher - e_student
    sq = T.tsum(diff * diff, axis=-3)
    return _reduce(sq, np.asarray(w, dtype=np.float64), reduction)


def reg_kd_loss(b_teacher, b_student, w, reduction="sum", variant="iou"):
    """``sum_p (1 - IoU(B_t(p), B_s(p))) w(p)``; boxes ``[4,G,G]`` or ``[N,4,G,G]`` cxcywh."""
    b_teacher = T.as_tensor(b_teacher)
    b_student = T.as_tensor(b_student)
    if b_teacher.shape != b_student.shape:
        raise DimensionError(f"box shapes differ: {b_teacher.shape} vs {b_student.shape}")
    axes = tuple(range(b_student.ndim - 3)) + (b_student.ndim - 2, b_student.ndim - 1, b_student.ndim - 3)
    s = T.transpose(b_student, axes)
    t = T.transpose(b_teacher, axes)
    overlap = box_iou(s, t) if variant == "iou" else box_giou(s, t)
    return _reduce(1.0 - overlap, np.asarray(w, dtype=np.float64), reduction)


def teacher_outputs(teacher, images, class_ids):
    """Frozen teacher's own ``(E, logits, B)`` on ``images``."""
    with T.no_grad():
        neck = encode_image(teacher, images)
        emb = teacher.embed_head(neck)
        logits = region_text_scores(emb, teacher.vocab(class_ids),
                                    teacher.params["eta"], teacher.params["zeta"])
        boxes = regress_boxes(neck, teacher)
    return emb.data, logits.data, boxes.data


@dataclass
class TeacherTargets:
    """Precomputed teacher embeddings, focal weights and boxes for a dataset."""

    embeddings: np.ndarray
    weights: np.ndarray
    boxes: np.ndarray

    @classmethod
    def compute(cls, teacher, images, class_ids, chunk=64):
        parts = []
        for i in range(0, len(images), chunk):
            e, logits, b = teacher_outputs(teacher, T.Tensor(np.asarray(images[i:i + chunk])), class_ids)
            parts.append((e, focal_weight(logits), b))
        return cls(*(np.concatenate(p) for p in zip(*parts)))

    def take(self, idx):
        return TeacherTargets(self.embeddings[idx], self.weights[idx], self.boxes[idx])


def _routes(teachers, cfg):
    routes = []
    if cfg.use_old and teachers.old_teacher is not None and teachers.old_classes:
        routes.append(("old", teachers.old_teacher, teachers.old_classes))
    if cfg.use_current and teachers.current_teacher is not None and teachers.current_classes:
        routes.append(("cur", teachers.current_teacher, teachers.current_classes))
    return routes


def cakd_terms(student, teachers, images, cfg, student_neck=None, targets=None):
    """Named loss terms ``old_cls, old_reg, cur_cls, cur_reg`` with weights applied.

    ``targets`` optionally maps ``"old"``/``"cur"`` to precomputed
    TeacherTargets for exactly these images.
    """
    images = T.as_tensor(images)
    if images.ndim == 3:
        images = T.Tensor(images.data[None])
        if student_neck is not None:
            student_neck = T.reshape(student_neck, (1,) + student_neck.shape)
    if student_neck is None:
        student_neck = encode_image(student, images)
    terms = {}
    for tag, teacher, classes in _routes(teachers, cfg):
        tt = (targets or {}).get(tag) or TeacherTargets.compute(teacher, images.data, classes)
        e_s, b_s = cross_head_features(student_neck, teacher)
        terms[f"{tag}_cls"] = cls_kd_loss(tt.embeddings, e_s, tt.weights, cfg.reduction) * cfg.alpha
        terms[f"{tag}_reg"] = reg_kd_loss(tt.boxes, b_s, tt.weights, cfg.reduction, cfg.iou_loss) * cfg.beta
    return terms


def cakd_loss(student, teachers, images, cfg, student_neck=None, targets=None):
    """``alpha * L_cls + beta * L_reg`` summed over both teachers."""
    total = T.Tensor(0.0)
    for v in cakd_terms(student, teachers, images, cfg, student_neck, targets).values():
        total = total + v
    return total
