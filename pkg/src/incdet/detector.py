"""Miniature open-vocabulary dense detector.

Three conv layers turn a ``[3,H,W]`` image into a ``[D,G,G]`` neck map. Two
heads read the neck: a classification head emitting one region embedding per
cell, scored against class text prototypes by scaled cosine similarity, and a
regression head emitting one cell-anchored box per cell.
"""

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .rng import substream
from .tensor import DimensionError, Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int
    act: bool = True

    @property
    def pad(self):
        return self.k // 2


@dataclass(frozen=True)
class Architecture:
    """Layer list plus the constants the heads depend on."""

    channels: tuple = (16, 24)
    embed_dim: int = 16
    image_size: int = 32
    head_kernel: int = 3
    s_max: float = 0.5

    @property
    def layers(self):
        c1, c2 = self.channels
        d = self.embed_dim
        return (
            ConvSpec("backbone.conv1", 3, c1, 3, 2),
            ConvSpec("backbone.conv2", c1, c2, 3, 2),
            ConvSpec("neck.conv3", c2, d, 3, 1),
            ConvSpec("head.cls", d, d, self.head_kernel, 1, act=False),
            ConvSpec("head.reg", d, 4, self.head_kernel, 1, act=False),
        )

    @property
    def total_stride(self):
        s = 1
        for spec in self.layers[:3]:
            s *= spec.stride
        return s

    @property
    def grid(self):
        return self.image_size // self.total_stride

    def to_dict(self):
        return {"channels": list(self.channels), "embed_dim": self.embed_dim,
                "image_size": self.image_size, "head_kernel": self.head_kernel,
                "s_max": self.s_max}

    @classmethod
    def from_dict(cls, d):
        return cls(channels=tuple(d["channels"]), embed_dim=d["embed_dim"],
                   image_size=d["image_size"], head_kernel=d["head_kernel"], s_max=d["s_max"])


@dataclass(frozen=True, order=True)
class KernelId:
    """One output-channel filter of a named conv layer."""

    layer_name: str
    out_channel: int

    def __str__(self):
        return f"{self.layer_name}[{self.out_channel}]"


@dataclass
class TextPrototypes:
    """Unit-norm embedding per class id."""

    class_ids: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.class_ids = [int(c) for c in self.class_ids]
        embs = np.asarray(self.embeddings, dtype=np.float64)
        self.embeddings = embs.reshape(len(self.class_ids), -1) if embs.size else embs.reshape(len(self.class_ids), 0)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class ids in prototypes")

    @classmethod
    def synthetic(cls, class_ids, dim, seed, stream="text"):
        """Seeded random unit vectors, one stream per class so ids are stable."""
        embs = []
        for cid in class_ids:
            v = substream(seed, stream, int(cid)).standard_normal(dim)
            embs.append(v / np.linalg.norm(v))
        return cls(list(class_ids), np.array(embs).reshape(len(class_ids), dim))

    def __len__(self):
        return len(self.class_ids)

    @property
    def dim(self):
        return self.embeddings.shape[1] if len(self.class_ids) else 0

    def subset(self, class_ids):
        index = {c: i for i, c in enumerate(self.class_ids)}
        rows = [index[int(c)] for c in class_ids]
        return TextPrototypes(list(class_ids), self.embeddings[rows])

    def merge(self, other):
        if not len(self):
            return other
        if not len(other):
            return self
        return TextPrototypes(self.class_ids + other.class_ids,
                              np.concatenate([self.embeddings, other.embeddings]))


@dataclass
class Detection:
    box: tuple  # (cx, cy, w, h), normalized
    class_id: int
    score: float

    def corners(self):
        cx, cy, w, h = self.box
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass
class DetectorModel:
    """Named parameter store for the toy detector.

    ``params`` maps names to leaf tensors: ``<layer>.weight`` /
    ``<layer>.bias`` per conv layer, ``eta``, ``zeta`` and ``proto.<class>``
    for every class the model has been given a prototype for. ``update_masks``
    restricts which entries an optimizer step may change.
    """

    arch: Architecture = field(default_factory=Architecture)
    params: dict = field(default_factory=dict)
    seed: int = 0
    update_masks: dict = field(default_factory=dict)  # param name -> 0/1 array, see iks

    @classmethod
    def initialize(cls, arch=None, seed=0):
        arch = arch or Architecture()
        rng = substream(seed, "init")
        params = {}
        for spec in arch.layers:
            fan_in = spec.c_in * spec.k * spec.k
            w = rng.standard_normal((spec.c_out, spec.c_in, spec.k, spec.k)) * np.sqrt(2.0 / fan_in)
            params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True)
            params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.c_out), requires_grad=True)
        params["eta"] = Tensor(1.0, requires_grad=True)
        params["zeta"] = Tensor(0.0, requires_grad=True)
        return cls(arch=arch, params=params, seed=seed)

    # ------------------------------------------------------------ structure

    @property
    def conv_layers(self):
        return self.arch.layers

    def layer(self, name):
        for spec in self.arch.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def kernel_ids(self):
        return [KernelId(s.name, c) for s in self.arch.layers for c in range(s.c_out)]

    def class_ids(self):
        return sorted(int(k.split(".", 1)[1]) for k in self.params if k.startswith("proto."))

    def add_prototypes(self, prototypes):
        """Register prototypes for classes the model does not know yet."""
        for cid, emb in zip(prototypes.class_ids, prototypes.embeddings):
            key = f"proto.{cid}"
            if key not in self.params:
                self.params[key] = Tensor(emb.copy(), requires_grad=True)

    def prototype_tensor(self, class_ids):
        """``[C, D]`` stack of the model's (learnable) prototypes."""
        return T.stack([self.params[f"proto.{c}"] for c in class_ids])

    def vocab(self, class_ids=None):
        ids = self.class_ids() if class_ids is None else list(class_ids)
        embs = np.array([self.params[f"proto.{c}"].data for c in ids]).reshape(len(ids), -1)
        norms = np.linalg.norm(embs, axis=1, keepdims=True) if len(ids) else 1.0
        return TextPrototypes(ids, embs / norms)

    # -------------------------------------------------------------- forward

    def conv(self, name, x):
        spec = self.layer(name)
        y = T.conv2d(x, self.params[f"{name}.weight"], spec.stride, spec.pad)
        b = self.params[f"{name}.bias"]
        y = y + (T.reshape(b, (-1, 1, 1)))
        return T.silu(y) if spec.act else y

    def embed_head(self, neck):
        return self.conv("head.cls", neck)

    def reg_head(self, neck):
        return self.conv("head.reg", neck)

    # ---------------------------------------------------------- persistence

    def clone(self, requires_grad=True):
        params = {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.params.items()}
        return DetectorModel(arch=self.arch, params=params, seed=self.seed)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def checksum(self):
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def to_dict(self):
        return {
            "format": "incdet-checkpoint",
            "version": CHECKPOINT_VERSION,
            "arch": self.arch.to_dict(),
            "seed": self.seed,
            "params": {k: _encode_array(v.data) for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "incdet-checkpoint":
            raise ValueError("not an incdet checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        params = {k: Tensor(_decode_array(v), requires_grad=True) for k, v in d["params"].items()}
        return cls(arch=Architecture.from_dict(d["arch"]), params=params, seed=d["seed"])

    def save(self, path, extra=None):
        payload = self.to_dict()
        if extra:
            payload["extra"] = extra
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


# ------------------------------------------------------------------ pipeline


def encode_image(model, image):
    """Neck features ``[D,G,G]`` (or ``[N,D,G,G]`` for a batch)."""
    image = T.as_tensor(image)
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise DimensionError(f"image must be [3,H,W] or [N,3,H,W], got {image.shape}")
    stride = model.arch.total_stride
    h, w = image.shape[-2:]
    if h % stride or w % stride:
        raise DimensionError(f"image axes ({h},{w}) not divisible by backbone stride {stride}")
    x = model.conv("backbone.conv1", image)
    x = model.conv("backbone.conv2", x)
    return model.conv("neck.conv3", x)


def region_text_scores(embeddings, prototypes, eta, zeta):
    """Scaled cosine logits ``eta * <norm(e_cell), norm(p_j)> + zeta``.

    ``embeddings`` is ``[D,G,G]`` or ``[N,D,G,G]``; ``prototypes`` is a
    TextPrototypes or a ``[C,D]`` tensor. Returns ``[C,G,G]`` (``[N,C,G,G]``).
    """
    embeddings = T.as_tensor(embeddings)
    if isinstance(prototypes, TextPrototypes):
        prototypes = Tensor(prototypes.embeddings)
    prototypes = T.as_tensor(prototypes)
    d = embeddings.shape[-3]
    if prototypes.shape[-1] != d:
        raise DimensionError(f"prototype dim {prototypes.shape[-1]} != embedding dim {d}")
    unit_e = T.l2_normalize(embeddings, axis=-3)
    unit_p = T.l2_normalize(prototypes, axis=-1)
    batched = embeddings.ndim == 4
    e = unit_e if batched else T.reshape(unit_e, (1,) + unit_e.shape)
    n, _, g1, g2 = e.shape
    flat = T.reshape(e, (n, d, g1 * g2))
    cos = T.matmul(unit_p, flat)  # [N, C, G*G]
    logits = T.reshape(cos, (n, prototypes.shape[0], g1, g2)) * T.as_tensor(eta) + T.as_tensor(zeta)
    return logits if batched else T.reshape(logits, logits.shape[1:])


def decode_boxes(raw, s_max):
    """Cell-anchored ``(cx, cy, w, h)`` boxes from raw head output ``[...,4,G,G]``."""
    raw = T.as_tensor(raw)
    g = raw.shape[-1]
    s = T.sigmoid(raw)
    cols = np.arange(g, dtype=np.float64).reshape(1, g)
    rows = np.arange(g, dtype=np.float64).reshape(g, 1)
    cx = (s[..., 0, :, :] + cols) * (1.0 / g)
    cy = (s[..., 1, :, :] + rows) * (1.0 / g)
    w = s[..., 2, :, :] * s_max
    h = s[..., 3, :, :] * s_max
    return T.stack([cx, cy, w, h], axis=-3)


def regress_boxes(features, model):
    """Boxes ``[4,G,G]`` (or ``[N,4,G,G]``) from neck features."""
    return decode_boxes(model.reg_head(features), model.arch.s_max)


def forward(model, images, class_ids):
    """Full forward pass; returns ``(neck, embeddings, logits, boxes)``."""
    neck = encode_image(model, images)
    emb = model.embed_head(neck)
    logits = region_text_scores(emb, model.prototype_tensor(class_ids),
                                model.params["eta"], model.params["zeta"])
    boxes = regress_boxes(neck, model)
    return neck, emb, logits, boxes


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def postprocess(scores, boxes, class_ids, score_thresh, nms_iou):
    """Thresholded, per-class NMS'd detections for one image.

    ``scores`` is ``[C,G,G]`` sigmoid probabilities and ``boxes`` ``[4,G,G]``.
    Ties between equal scores go to the lower cell index.
    """
    c, g1, g2 = scores.shape
    flat_boxes = boxes.reshape(4, g1 * g2).T
    out = []
    for ci, cid in enumerate(class_ids):
        s = scores[ci].reshape(-1)
        cells = np.nonzero(s > score_thresh)[0]
        if cells.size == 0:
            continue
        order = cells[np.lexsort((cells, -s[cells]))]
        corners = cxcywh_to_xyxy(flat_boxes[order])
        keep = _kernels.nms(np.ascontiguousarray(corners), nms_iou)
        for k in keep:
            cell = order[k]
            out.append((float(s[cell]), ci, int(cell), Detection(tuple(float(v) for v in flat_boxes[cell]),
                                                                  int(cid), float(s[cell]))))
    out.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [t[3] for t in out]


def detect(model, image, vocab, score_thresh=0.05, nms_iou=0.5):
    """Detections on one image against ``vocab`` (TextPrototypes)."""
    return detect_batch(model, T.as_tensor(image).data[None], vocab, score_thresh, nms_iou)[0]


def detect_batch(model, images, vocab, score_thresh=0.05, nms_iou=0.5):
    if not (0.0 < score_thresh < 1.0 and 0.0 < nms_iou < 1.0):
        raise ValueError("thresholds must lie in (0, 1)")
    with T.no_grad():
        neck = encode_image(model, Tensor(np.asarray(images, dtype=np.float64)))
        emb = model.embed_head(neck)
        logits = region_text_scores(emb, vocab, model.params["eta"], model.params["zeta"])
        boxes = regress_boxes(neck, model).data
    scores = T._sigmoid(logits.data)
    return [postprocess(scores[i], boxes[i], vocab.class_ids, score_thresh, nms_iou)
            for i in range(scores.shape[0])]
