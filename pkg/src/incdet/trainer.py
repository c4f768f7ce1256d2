"""Stage-wise incremental training.

Each stage fine-tunes the previous model on the new task's data. Optional
modules add pseudo-label supervision for old classes (plain or
confidence-aware), unknown super-category supervision for unlabelled
foreground, kernel-level selective updating, and dual-teacher distillation.
"""

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import cakd as kd
from . import cpr as cp
from . import iks
from . import tensor as T
from .detector import (Architecture, DetectorModel, TextPrototypes, detect_batch, encode_image, forward, region_text_scores,
                       regress_boxes)
from .evaluation import evaluate, gap_metrics
from .losses import DenseTargets, box_iou, box_loss, cell_of, classification_bce, gt_targets
from .rng import derive_seed, substream
from .synth import (SceneSpec, TaskSequence, annotate_for_task, build_task_sequence, hue_palette,
                    make_stage_dataset, stack_images)

log = logging.getLogger(__name__)

TEXT_DIM = 16


@dataclass
class StageConfig:
    """Training hyperparameters and module toggles for a whole experiment."""

    epochs: int = 25
    teacher_epochs: int = 25
    pretrain_epochs: int = 25
    lr_backbone: float = 0.003
    lr_head: float = 0.003
    momentum: float = 0.9
    grad_clip: float = 10.0
    warmup_steps: int = 250
    batch_size: int = 16
    box_weight: float = 5.0
    w_task: float = 1.0
    w_pseudo: float = 1.0
    w_unk: float = 0.5
    w_kd: float = 0.3
    hard_pseudo_thresh: float = 0.5
    use_pseudo: bool = False
    use_cpr: bool = False
    use_iks: bool = False
    use_cakd: bool = False
    iks_base_stage: bool = False
    seed: int = 0
    n_train: int = 400
    n_eval: int = 200
    n_pretrain: int = 400
    n_pretrain_classes: int = 16
    general_vocab: tuple = (50, 5)
    channels: tuple = (16, 24)
    cpr_cfg: cp.CprConfig = field(default_factory=cp.CprConfig)
    iks_cfg: iks.IksConfig = field(default_factory=iks.IksConfig)
    kd_cfg: kd.KdConfig = field(default_factory=kd.KdConfig)

    def __post_init__(self):
        for name in ("lr_backbone", "lr_head"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ValueError("batch_size must be positive; epochs and warmup_steps non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.general_vocab = tuple(self.general_vocab)
        self.channels = tuple(self.channels)
        if self.n_pretrain_classes > self.general_vocab[0]:
            raise ValueError(f"n_pretrain_classes ({self.n_pretrain_classes}) exceeds the general vocabulary's "
                             f"{self.general_vocab[0]} common entries")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        subs = {"cpr_cfg": cp.CprConfig, "iks_cfg": iks.IksConfig, "kd_cfg": kd.KdConfig}
        for key, typ in subs.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


TOGGLE_ROWS = {
    "off": dict(use_pseudo=False, use_cpr=False, use_iks=False, use_cakd=False),
    "a": dict(use_pseudo=True, use_cpr=False, use_iks=False, use_cakd=False),
    "b": dict(use_pseudo=True, use_cpr=True, use_iks=False, use_cakd=False),
    "c": dict(use_pseudo=True, use_cpr=True, use_iks=True, use_cakd=False),
    "d": dict(use_pseudo=True, use_cpr=False, use_iks=False, use_cakd=True),
    "e": dict(use_pseudo=True, use_cpr=True, use_iks=True, use_cakd=True),
}


# ------------------------------------------------------------------ optimizer


class MomentumSGD:
    """Heavy-ball gradient descent honouring ``model.update_masks``.

    Gradients are clipped elementwise to ``[-clip, clip]`` and the learning
    rate ramps up linearly over the first ``warmup_steps`` steps. Masked-out
    entries are never written, so frozen values stay bit-identical.
    """

    def __init__(self, model, trainable, cfg):
        self.model = model
        self.trainable = list(trainable)
        self.cfg = cfg
        self.velocity = {k: np.zeros_like(model.params[k].data) for k in self.trainable}
        self.n_steps = 0

    def lr(self, name):
        base = self.cfg.lr_backbone if name.startswith("backbone.") else self.cfg.lr_head
        warm = self.cfg.warmup_steps
        return base * min(1.0, (self.n_steps + 1) / warm) if warm else base

    def step(self):
        masks = self.model.update_masks
        for name in self.trainable:
            p = self.model.params[name]
            if p.grad is None:
                continue
            g = np.clip(p.grad, -self.cfg.grad_clip, self.cfg.grad_clip) if self.cfg.grad_clip else p.grad
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += g
            upd = self.lr(name) * v
            mask = masks.get(name)
            if mask is None:
                p.data -= upd
            else:
                sel = np.broadcast_to(mask, p.shape) != 0
                v[~sel] = 0.0
                p.data[sel] -= upd[sel]
        self.n_steps += 1


class StepHooks:
    """Callbacks around optimizer steps; subclass and override."""

    def before_step(self, model, step):
        pass

    def after_step(self, model, step):
        pass


def optimize(model, n_items, batch_loss, cfg, epochs, stream, trainable, hooks=None):
    """Minibatch loop; ``batch_loss(idx)`` returns ``(total, components)``.

    Returns per-epoch mean component values.
    """
    rng = substream(cfg.seed, "batches", *stream)
    opt = MomentumSGD(model, trainable, cfg)
    hooks = hooks or StepHooks()
    history = []
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n_items)
        sums, n_batches = {}, 0
        for b in range(0, n_items, cfg.batch_size):
            idx = np.sort(perm[b:b + cfg.batch_size])
            total, comps = batch_loss(idx)
            model.zero_grad()
            total.backward()
            hooks.before_step(model, step)
            opt.step()
            hooks.after_step(model, step)
            step += 1
            n_batches += 1
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v.item()
        history.append({k: v / max(n_batches, 1) for k, v in sums.items()})
    model.zero_grad()
    return history


# --------------------------------------------------------------- task loss


def detection_task_loss(model, images, annotations, class_ids, box_weight=5.0):
    """BCE over every class logit plus weighted ``1 - IoU`` at GT centre cells."""
    _, _, logits, boxes = forward(model, T.as_tensor(images), class_ids)
    tg = gt_targets(annotations, class_ids, model.arch.grid)
    return classification_bce(logits, tg) + box_loss(boxes, tg) * box_weight


def fine_tune(model, dataset, class_ids, cfg, stream, epochs=None, hooks=None):
    """Plain supervised training on ``dataset`` restricted to ``class_ids``."""
    x = stack_images(dataset)
    anns = [d.annotations for d in dataset]
    class_ids = list(class_ids)
    trainable = [k for k in model.params if not k.startswith("proto.") or int(k[6:]) in class_ids]

    def batch_loss(idx):
        _, _, logits, boxes = forward(model, T.Tensor(x[idx]), class_ids)
        tg = gt_targets([anns[i] for i in idx], class_ids, model.arch.grid)
        comps = {"task_cls": classification_bce(logits, tg) * cfg.w_task,
                 "task_box": box_loss(boxes, tg) * (cfg.box_weight * cfg.w_task)}
        return _sum(comps), comps

    return optimize(model, len(dataset), batch_loss, cfg, cfg.epochs if epochs is None else epochs,
                    stream, trainable, hooks)


def _sum(comps):
    total = T.Tensor(0.0)
    for v in comps.values():
        total = total + v
    return total


# ------------------------------------------------------------ base models


def text_prototypes(universe, seed):
    """Fixed stand-in text embeddings for the task categories."""
    return TextPrototypes.synthetic(sorted(universe), TEXT_DIM, seed)


def general_scene_spec(cfg, base=None):
    """Pretraining scenes: general-vocabulary categories on interleaved hues."""
    base = base or SceneSpec()
    ids = list(range(cp.GENERAL_VOCAB_BASE, cp.GENERAL_VOCAB_BASE + cfg.n_pretrain_classes))
    return dataclasses.replace(base, palette=hue_palette(ids, offset=0.5))


def pretrain_base_model(cfg, spec=None):
    """Stage-0 model trained on general-vocabulary scenes.

    It initializes every stage model and the current teachers, and serves as
    the open-vocabulary detector for unknown-object discovery.
    """
    gspec = general_scene_spec(cfg, spec)
    vocab = cp.build_general_vocabulary(*cfg.general_vocab, cfg.seed)
    model = DetectorModel.initialize(Architecture(channels=cfg.channels), seed=cfg.seed)
    model.add_prototypes(vocab)
    data = make_stage_dataset(gspec, gspec.class_ids, cfg.n_pretrain, cfg.seed, "pretrain", full_labels=True)
    fine_tune(model, data, gspec.class_ids, cfg, ("pretrain",), epochs=cfg.pretrain_epochs)
    return model


def discovery_vocabulary(base, cfg):
    """General vocabulary with learned prototypes where the base model has them."""
    vocab = cp.build_general_vocabulary(*cfg.general_vocab, cfg.seed)
    embs = np.array([base.params[f"proto.{c}"].data if f"proto.{c}" in base.params else e
                     for c, e in zip(vocab.class_ids, vocab.embeddings)])
    return TextPrototypes(vocab.class_ids, embs / np.linalg.norm(embs, axis=1, keepdims=True))


def strip_prototypes(model, keep):
    keep = {int(c) for c in keep}
    for k in [k for k in model.params if k.startswith("proto.") and int(k[6:]) not in keep]:
        del model.params[k]
    return model


def train_current_teacher(base, dataset, classes, cfg, stage=0):
    """Base-initialized model fine-tuned on the current task only, then frozen."""
    teacher = strip_prototypes(base.clone(), [])
    teacher.add_prototypes(text_prototypes(classes, cfg.seed))
    fine_tune(teacher, dataset, classes, cfg, ("teacher", stage), epochs=cfg.teacher_epochs)
    return teacher.freeze()


# ------------------------------------------------------------ stage training


@dataclass
class StageContext:
    """Everything a stage's batch loss needs, precomputed once per stage."""

    images: np.ndarray
    annotations: list
    current: list
    old: list
    unknown_ids: list
    pseudo: list  # per image: list of PseudoLabel (old classes)
    unknown: list  # per image: list of PseudoLabel (super-categories)
    teachers: kd.TeacherPair = None
    teacher_targets: dict = field(default_factory=dict)

    @property
    def known(self):
        return self.old + self.current

    @property
    def classes(self):
        return self.old + self.current + self.unknown_ids


def _dedupe_cells(labels, grid):
    best = {}
    for pl in labels:
        key = (cell_of(pl.box, grid), pl.class_id)
        if key not in best or pl.s > best[key].s:
            best[key] = pl
    return [best[k] for k in sorted(best)]


def stage_batch_loss(model, ctx, idx, cfg):
    """Total loss and its weighted components for one minibatch."""
    x = T.Tensor(ctx.images[idx])
    classes = ctx.classes
    neck = encode_image(model, x)
    emb = model.embed_head(neck)
    logits = region_text_scores(emb, model.prototype_tensor(classes), model.params["eta"], model.params["zeta"])
    boxes = regress_boxes(neck, model)
    g = model.arch.grid
    tg = DenseTargets.empty(len(idx), classes, g)
    for n, i in enumerate(idx):
        for box, cid in ctx.annotations[i]:
            if int(cid) in ctx.current:
                tg.add_positive(n, box, cid)

    comps = {}
    soft = cfg.use_cpr
    hard = cfg.use_pseudo and not cfg.use_cpr
    p_idx, p_s, p_box = [], [], []
    if soft or hard:
        for n, i in enumerate(idx):
            for pl in _dedupe_cells(ctx.pseudo[i], g):
                if hard and pl.s < cfg.hard_pseudo_thresh:
                    continue
                r, c = cell_of(pl.box, g)
                k = tg.index(pl.class_id)
                if tg.target[n, k, r, c] == 1.0:
                    continue  # GT already supervises this entry
                tg.mask[n, k, r, c] = 0.0
                p_idx.append((n, k, r, c))
                p_s.append(1.0 if hard else pl.s)
                p_box.append(pl.box)
    u_idx, u_s = [], []
    if cfg.use_cpr:
        for n, i in enumerate(idx):
            for pl in _dedupe_cells(ctx.unknown[i], g):
                r, c = cell_of(pl.box, g)
                k = tg.index(pl.class_id)
                tg.mask[n, k, r, c] = 0.0
                u_idx.append((n, k, r, c))
                u_s.append(pl.s)

    comps["task_cls"] = classification_bce(logits, tg) * cfg.w_task
    comps["task_box"] = box_loss(boxes, tg) * (cfg.box_weight * cfg.w_task)
    inv_n = 1.0 / len(idx)
    n_known = len(ctx.known)
    if p_idx:
        n_, k_, r_, c_ = (np.array(a) for a in zip(*p_idx))
        lg = logits[n_, k_, r_, c_]
        if hard:
            cls_term = T.tsum(T.bce_with_logits(lg, np.ones(len(p_idx))))
        else:
            dist = T.softmax(logits[n_, :n_known, r_, c_], axis=-1)
            cls_term = cp.enhanced_pseudo_cls_loss_tensor(T.sigmoid(lg), p_s, dist, cfg.cpr_cfg)
        comps["pseudo_cls"] = cls_term * (inv_n * cfg.w_pseudo)
        pred = T.transpose(boxes, (0, 2, 3, 1))[n_, r_, c_]
        iou = box_iou(pred, np.array(p_box, dtype=np.float64))
        comps["pseudo_box"] = T.tsum((1.0 - iou) * np.array(p_s)) * (inv_n * cfg.box_weight * cfg.w_pseudo)
    if u_idx:
        n_, k_, r_, c_ = (np.array(a) for a in zip(*u_idx))
        dist = T.softmax(logits[n_, :n_known, r_, c_], axis=-1)
        comps["unknown_cls"] = cp.enhanced_pseudo_cls_loss_tensor(
            T.sigmoid(logits[n_, k_, r_, c_]), u_s, dist, cfg.cpr_cfg) * (inv_n * cfg.w_unk)
    if cfg.use_cakd and ctx.teachers is not None:
        targets = {k: v.take(idx) for k, v in ctx.teacher_targets.items()}
        for k, v in kd.cakd_terms(model, ctx.teachers, x, cfg.kd_cfg, neck, targets).items():
            comps[f"kd_{k}"] = v * cfg.w_kd
    return _sum(comps), comps


def _fisher_loss(classes, cfg):
    def loss_fn(model, sample):
        return detection_task_loss(model, sample.image[None], [sample.annotations], classes, cfg.box_weight)
    return loss_fn


def train_stage(student, dataset, old_model, ledger, cfg, *, stage, classes, old_classes=(),
                base_model=None, teacher=None, hooks=None, info=None):
    """One incremental stage; returns ``(M_t, ledger)``.

    ``student`` is modified in place (pass a clone of ``M_{t-1}``).
    ``base_model`` is the stage-0 model used for current teachers and
    unknown discovery; ``teacher`` may be supplied to reuse a trained
    current teacher. ``info`` (a dict) receives stage diagnostics.
    """
    info = {} if info is None else info
    classes = sorted(int(c) for c in classes)
    old_classes = sorted(int(c) for c in old_classes)
    ledger = iks.ImportanceLedger(dict(ledger.records)) if ledger is not None else iks.ImportanceLedger()
    images = stack_images(dataset)
    anns = [d.annotations for d in dataset]
    incremental = old_model is not None and bool(old_classes)

    # (1) current teacher
    teachers = None
    if cfg.use_cakd and incremental:
        if teacher is None:
            teacher = train_current_teacher(base_model, dataset, classes, cfg, stage)
        teachers = kd.TeacherPair(old_model, old_classes, teacher, classes)

    # (2) pseudo labels for old classes, unknown super-categories for the rest
    strip_prototypes(student, old_classes)
    student.add_prototypes(text_prototypes(classes, cfg.seed))
    pseudo = [[] for _ in dataset]
    if incremental and (cfg.use_pseudo or cfg.use_cpr):
        pseudo = cp.generate_pseudo_labels_batch(old_model, images, old_classes, cfg.cpr_cfg)
    info["n_pseudo"] = int(sum(len(p) for p in pseudo))
    unknown = [[] for _ in dataset]
    unknown_ids = []
    if cfg.use_cpr and base_model is not None:
        unknown, super_cats = discover_and_cluster(base_model, images, anns, pseudo, cfg, stage)
        if super_cats is not None and len(super_cats):
            unknown_ids = super_cats.ids
            for uid, cent in zip(super_cats.ids, super_cats.centroids):
                student.params[f"proto.{uid}"] = T.Tensor(cent.copy(), requires_grad=True)
            info["unknown_members"] = {str(k): v for k, v in super_cats.members.items()}
    info["n_unknown"] = int(sum(len(u) for u in unknown))

    # (3) kernel selection
    use_iks = cfg.use_iks and (incremental or cfg.iks_base_stage)
    iks.clear_freeze_mask(student)
    current_imp = None
    if cfg.use_iks and cfg.iks_cfg.record == "start":
        current_imp = iks.kernel_importance(student, dataset, _fisher_loss(classes, cfg))
    if use_iks:
        if current_imp is None:
            current_imp = iks.kernel_importance(student, dataset, _fisher_loss(classes, cfg))
        delta = iks.differential_importance(current_imp, ledger, cfg.iks_cfg.rho)
        ratio = cfg.iks_cfg.ratio_incremental if incremental else cfg.iks_cfg.ratio_base
        selected = iks.select_top_k(delta, ratio)
        iks.apply_freeze_mask(student, selected)
        info["selected_kernels"] = [str(k) for k in selected]

    # (4) optimisation
    ctx = StageContext(images, anns, classes, old_classes, unknown_ids, pseudo, unknown, teachers)
    if teachers is not None:
        ctx.teacher_targets = {
            "old": kd.TeacherTargets.compute(old_model, images, old_classes),
            "cur": kd.TeacherTargets.compute(teacher, images, classes),
        }
    trainable = [k for k in student.params
                 if not k.startswith("proto.") or int(k[6:]) in classes]
    info["loss_history"] = optimize(student, len(dataset), lambda idx: stage_batch_loss(student, ctx, idx, cfg),
                                    cfg, cfg.epochs, ("stage", stage), trainable, hooks)
    iks.clear_freeze_mask(student)
    strip_prototypes(student, old_classes + classes)

    # (5) record I_t
    if cfg.use_iks:
        if cfg.iks_cfg.record == "end":
            current_imp = iks.kernel_importance(student, dataset, _fisher_loss(classes, cfg))
        ledger.add(stage, current_imp)
    return student, ledger


def discover_and_cluster(base_model, images, anns, pseudo, cfg, stage):
    """Unknown pseudo-labels per image and the super-categories behind them."""
    vocab = discovery_vocabulary(base_model, cfg)
    known = [[b for b, _ in a] + [pl.box for pl in p] for a, p in zip(anns, pseudo)]
    found = cp.discover_unknown_batch(base_model, vocab, images, known, cfg.cpr_cfg.iou_gate,
                                      cfg.cpr_cfg.discovery_thresh)
    freq = {}
    for f in found:
        for _, cat, _ in f:
            freq[cat] = freq.get(cat, 0) + 1
    if not freq:
        return [[] for _ in images], None
    k = min(cfg.cpr_cfg.kmeans_k, len(freq))
    text = cp.build_general_vocabulary(*cfg.general_vocab, cfg.seed)
    super_cats = cp.cluster_unknown_categories(list(freq), freq, text, k, derive_seed(cfg.seed, "unknown", stage))
    return [cp.relabel_with_super_categories(f, super_cats) for f in found], super_cats


# ---------------------------------------------------------------- reporting


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    tasks: list
    stages: list = field(default_factory=list)
    joint_map: float = None
    wall_time: float = 0.0

    @property
    def final_map(self):
        return self.stages[-1]["mAP_all"]

    def gaps(self):
        if self.joint_map is None:
            return None
        return gap_metrics(self.final_map, self.joint_map)

    def to_dict(self, timing=True):
        stages = self.stages if timing else [{k: v for k, v in s.items() if k != "wall_time"} for s in self.stages]
        d = {"config": self.config, "seed": self.seed, "tasks": self.tasks, "stages": stages,
             "joint_mAP": self.joint_map}
        if timing:
            d["wall_time"] = self.wall_time
        g = self.gaps()
        d["AbsGap"], d["RelGap"] = (g if g else (None, None))
        return d

    def to_json(self, path=None, timing=True):
        text = json.dumps(self.to_dict(timing), indent=2, sort_keys=True, default=list)
        if path:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "classes", "mAP_all", "mAP_old", "mAP_new", "AP50", "AP75"])
        for s in self.stages:
            w.writerow([s["stage"], " ".join(map(str, s["classes"])),
                        *(f"{s[k]:.6f}" if s[k] is not None else "" for k in
                          ("mAP_all", "mAP_old", "mAP_new", "AP50", "AP75"))])
        if path:
            with open(path, "w") as fh:
                fh.write(buf.getvalue())
        return buf.getvalue()


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and np.isnan(v)) else float(v)


def evaluate_stage(model, eval_set, seen, old, new):
    preds = detect_batch(model, stack_images(eval_set), model.vocab(seen), 0.05, 0.5)
    restricted = [annotate_for_task(d, seen) for d in eval_set]
    res = evaluate(preds, restricted, seen, {"old": list(old), "new": list(new), "all": list(seen)})
    return {"mAP_all": _nan_to_none(res.map), "mAP_old": _nan_to_none(res.group_map("old")) if old else None,
            "mAP_new": _nan_to_none(res.group_map("new")), "AP50": _nan_to_none(res.ap50),
            "AP75": _nan_to_none(res.ap75),
            "per_class": {str(c): _nan_to_none(res.class_map(c)) for c in res.classes}}


def _fingerprint(cfg, stage):
    d = cfg.to_dict()
    if stage == 0:
        for k in ("use_pseudo", "use_cakd", "kd_cfg", "hard_pseudo_thresh", "w_pseudo", "w_kd"):
            d.pop(k)
        if not cfg.iks_base_stage:
            d.pop("use_iks")
            d.pop("iks_cfg")
    return json.dumps(d, sort_keys=True, default=str)


def run_incremental_experiment(sequence, cfg, spec=None, cache=None, out_dir=None, hooks=None):
    """Train every stage of ``sequence`` and evaluate after each.

    ``sequence`` is a TaskSequence (datasets are generated if absent).
    ``cache`` (a dict) shares the stage-0 model, current teachers and stage
    results between runs that agree on everything those depend on.
    """
    t0 = time.perf_counter()
    spec = spec or SceneSpec()
    cache = {} if cache is None else cache
    universe = sequence.universe
    if not sequence.datasets:
        sequence = TaskSequence(sequence.tasks, [
            make_stage_dataset(spec, task, cfg.n_train, cfg.seed, f"train-{t}", start_id=t * cfg.n_train)
            for t, task in enumerate(sequence.tasks)])
    eval_set = make_stage_dataset(spec, [], cfg.n_eval, cfg.seed, "eval", start_id=10**6, full_labels=True)

    base_key = ("base", cfg.seed, cfg.channels, cfg.pretrain_epochs, cfg.n_pretrain, cfg.n_pretrain_classes,
                cfg.general_vocab, cfg.lr_backbone, cfg.lr_head, cfg.box_weight, cfg.batch_size,
                cfg.warmup_steps)
    if base_key not in cache:
        cache[base_key] = pretrain_base_model(cfg, spec)
    base = cache[base_key]

    report = ExperimentReport(cfg.to_dict(), cfg.seed, [list(t) for t in sequence.tasks])
    model, ledger = None, iks.ImportanceLedger()
    prefix = json.dumps([list(t) for t in sequence.tasks]) + str(cfg.n_train)
    for t, task in enumerate(sequence.tasks):
        st = time.perf_counter()
        prefix += _fingerprint(cfg, t)
        old = sequence.seen(t - 1) if t else []
        stage_key = ("stage", prefix)
        info = {}
        if stage_key in cache and hooks is None:
            model_c, ledger_c, info = cache[stage_key]
            model, ledger = model_c.clone(), iks.ImportanceLedger(dict(ledger_c.records))
        else:
            teacher = None
            if cfg.use_cakd and t > 0:
                tkey = ("teacher", base_key, tuple(task), cfg.teacher_epochs, cfg.n_train, t)
                if tkey not in cache:
                    cache[tkey] = train_current_teacher(base, sequence.datasets[t], task, cfg, t)
                teacher = cache[tkey]
            student = strip_prototypes(base.clone(), []) if t == 0 else model.clone()
            old_model = model.clone().freeze() if t else None
            model, ledger = train_stage(student, sequence.datasets[t], old_model, ledger, cfg, stage=t,
                                        classes=task, old_classes=old, base_model=base, teacher=teacher,
                                        hooks=hooks, info=info)
            cache[stage_key] = (model.clone(), iks.ImportanceLedger(dict(ledger.records)), info)
        if cfg.use_iks and t not in ledger.records:
            # cached from a run without IKS; the ledger still needs I_t
            ref = model
            if cfg.iks_cfg.record == "start":
                ref = strip_prototypes(base.clone(), [])
                ref.add_prototypes(text_prototypes(task, cfg.seed))
            ledger.add(t, iks.kernel_importance(ref, sequence.datasets[t], _fisher_loss(task, cfg)))
        seen = sequence.seen(t)
        row = {"stage": t, "classes": list(task), "seen": seen, "wall_time": time.perf_counter() - st,
               "n_pseudo": info.get("n_pseudo", 0), "n_unknown": info.get("n_unknown", 0),
               "n_selected": len(info.get("selected_kernels", [])) or None}
        row.update(evaluate_stage(model, eval_set, seen, old, task))
        report.stages.append(row)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            model.save(os.path.join(out_dir, f"stage{t}.json"),
                       extra={"stage": t, "seed": cfg.seed, "ledger": ledger.to_triples(),
                              "rng": {"root_seed": cfg.seed, "next_stream": ["batches", "stage", t + 1]}})
    report.wall_time = time.perf_counter() - t0
    report.final_model = model
    return report


def run_joint(universe, cfg, n_stages, spec=None, cache=None):
    """Joint-training upper bound: one stage over every class, same image budget."""
    seq = build_task_sequence(universe, [len(universe)], cfg.seed)
    return run_incremental_experiment(seq, cfg.replace(n_train=cfg.n_train * n_stages,
                                                       **TOGGLE_ROWS["off"]), spec, cache)
