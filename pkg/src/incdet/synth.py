"""Seeded synthetic scenes and incremental task sequences.

Scenes are dark noisy canvases with axis-aligned rectangles or ellipses; each
category owns a distinct hue. Boxes are normalized ``(cx, cy, w, h)``.
"""

import colorsys
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import substream


class ConfigError(ValueError):
    """Inconsistent experiment configuration."""


@dataclass(frozen=True)
class Category:
    shape: str  # "rect" or "ellipse"
    color: tuple  # RGB in [0, 1]


def hue_palette(class_ids, offset=0.0, n_hues=None):
    """Distinct saturated hues, alternating rectangle / ellipse."""
    n = n_hues or len(class_ids)
    pal = {}
    for i, cid in enumerate(class_ids):
        h = ((i + offset) / n) % 1.0
        pal[int(cid)] = Category("rect" if i % 2 == 0 else "ellipse", colorsys.hsv_to_rgb(h, 0.9, 0.95))
    return pal


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 32
    palette: dict = field(default_factory=lambda: hue_palette(range(1, 9)))
    objects: tuple = (1, 3)
    size_px: tuple = (6, 13)
    noise: float = 0.04
    grid: int = 8
    cooccurrence: np.ndarray = None  # optional [N,N] bias over sorted palette ids

    def __post_init__(self):
        lo, hi = self.objects
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid objects range {self.objects}")
        colors = [tuple(np.round(c.color, 6)) for c in self.palette.values()]
        if len(set(colors)) != len(colors):
            raise ConfigError("categories must have distinct color signatures")

    @property
    def class_ids(self):
        return sorted(self.palette)


@dataclass
class AnnotatedImage:
    image: np.ndarray  # [3,H,W]
    annotations: list  # [(box, class_id)]
    image_id: int

    @property
    def classes(self):
        return {c for _, c in self.annotations}


def _blob_mask(shape, x0, y0, w, h, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "rect":
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    return ((xx + 0.5 - cx) / (w / 2.0)) ** 2 + ((yy + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0


def _sample_classes(spec, rng, k, must_include):
    ids = spec.class_ids
    if spec.cooccurrence is not None and k >= 2:
        b = np.asarray(spec.cooccurrence, dtype=np.float64)
        iu = np.triu_indices(len(ids), 1)
        w = b[iu]
        pick = rng.choice(w.size, p=w / w.sum())
        pair = [ids[iu[0][pick]], ids[iu[1][pick]]]
        return pair + [pair[int(rng.integers(2))] for _ in range(k - 2)]
    classes = [int(rng.choice(ids)) for _ in range(k)]
    if must_include and k:
        allowed = sorted(must_include)
        if not set(classes) & set(allowed):
            classes[0] = int(rng.choice(allowed))
    return classes


def generate_scene(spec, rng_seed, image_id=0, must_include=None):
    """Render one scene; identical ``(spec, rng_seed)`` gives identical output."""
    rng = np.random.default_rng(rng_seed)
    size = spec.image_size
    img = np.full((3, size, size), 0.12) + spec.noise * rng.standard_normal((3, size, size))
    lo, hi = spec.objects
    k = int(rng.integers(lo, hi + 1))
    classes = _sample_classes(spec, rng, k, must_include)
    occupied = np.zeros((size, size), dtype=bool)
    cells = set()
    stride = size / spec.grid
    annotations = []
    for cid in classes:
        cat = spec.palette[cid]
        for _ in range(50):
            w = int(rng.integers(spec.size_px[0], spec.size_px[1] + 1))
            h = int(rng.integers(spec.size_px[0], spec.size_px[1] + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            mask = _blob_mask(cat.shape, x0, y0, w, h, size)
            pad = np.zeros_like(occupied)
            pad[max(y0 - 1, 0):y0 + h + 1, max(x0 - 1, 0):x0 + w + 1] = True
            ys, xs = np.nonzero(mask)
            bx0, bx1, by0, by1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
            cell = (int((by0 + by1) / 2 // stride), int((bx0 + bx1) / 2 // stride))
            if (occupied & pad).any() or cell in cells:
                continue
            occupied |= mask
            cells.add(cell)
            shade = 1.0 + 0.08 * rng.standard_normal()
            for ch in range(3):
                img[ch][mask] = np.clip(cat.color[ch] * shade, 0.0, 1.0)
            box = tuple(float(v) for v in ((bx0 + bx1) / 2 / size, (by0 + by1) / 2 / size,
                                           (bx1 - bx0) / size, (by1 - by0) / size))
            annotations.append((box, int(cid)))
            break
    return AnnotatedImage(img, annotations, int(image_id))


def annotate_for_task(img, classes):
    """Keep only annotations of ``classes``; pixels are shared, not copied."""
    classes = {int(c) for c in classes}
    return AnnotatedImage(img.image, [a for a in img.annotations if a[1] in classes], img.image_id)


@dataclass
class TaskSequence:
    tasks: list  # list of sorted category lists, C_1..C_n
    datasets: list = field(default_factory=list)  # D_1..D_n (lists of AnnotatedImage)

    def __post_init__(self):
        seen = set()
        for t in self.tasks:
            if seen & set(t):
                raise ConfigError("task category sets must be disjoint")
            seen |= set(t)

    @property
    def universe(self):
        return sorted(c for t in self.tasks for c in t)

    def seen(self, t):
        """Categories of tasks ``0..t`` inclusive (0-based)."""
        return sorted(c for task in self.tasks[: t + 1] for c in task)


def build_task_sequence(universe, split, rng_seed):
    """Seeded ordered partition of ``universe`` into tasks of ``split`` sizes."""
    universe = [int(c) for c in universe]
    if sum(split) != len(universe) or any(s <= 0 for s in split):
        raise ConfigError(f"split {list(split)} does not partition {len(universe)} categories")
    order = list(substream(rng_seed, "task-order").permutation(universe))
    tasks, start = [], 0
    for s in split:
        tasks.append(sorted(int(c) for c in order[start:start + s]))
        start += s
    return TaskSequence(tasks)


def parse_split(text):
    """``"4+4"`` or ``"2-2"`` style split spec (plus: single step, minus: repeated)."""
    text = text.strip()
    if "+" in text:
        return [int(p) for p in text.split("+")]
    if "-" in text:
        base, step = (int(p) for p in text.split("-"))
        return [base, step]
    return [int(text)]


def expand_split(text, n_classes):
    """Expand a multi-step ``"base-step"`` spec to full sizes for ``n_classes``."""
    text = text.strip()
    if "-" in text and "+" not in text:
        base, step = (int(p) for p in text.split("-"))
        sizes = [base]
        while sum(sizes) < n_classes:
            sizes.append(step)
        if sum(sizes) != n_classes:
            raise ConfigError(f"split {text!r} does not tile {n_classes} classes")
        return sizes
    sizes = parse_split(text)
    if sum(sizes) != n_classes:
        raise ConfigError(f"split {text!r} does not sum to {n_classes} classes")
    return sizes


def make_stage_dataset(spec, classes, n_images, root_seed, stream, start_id=0, full_labels=False):
    """``n_images`` scenes each containing a ``classes`` object.

    Annotations are restricted to ``classes`` unless ``full_labels``.
    """
    rng = substream(root_seed, "data", stream)
    seeds = rng.integers(0, 2**63 - 1, size=n_images)
    out = []
    for i, s in enumerate(seeds):
        img = generate_scene(spec, int(s), start_id + i, must_include=classes)
        out.append(img if full_labels else annotate_for_task(img, classes))
    return out


def stack_images(dataset):
    return np.stack([d.image for d in dataset])


# ------------------------------------------------------------- COCO interop


def to_coco(dataset, spec=None, names=None, confidence=None):
    """COCO-style dict; boxes become pixel ``[x, y, w, h]``.

    ``confidence`` optionally maps ``(image_id, ann_index)`` to a float which
    is written as an extra ``"confidence"`` field.
    """
    size = spec.image_size if spec else (dataset[0].image.shape[-1] if dataset else 32)
    cats = sorted({c for d in dataset for _, c in d.annotations} | set(spec.class_ids if spec else []))
    names = names or {}
    images, anns = [], []
    ann_id = 1
    for d in dataset:
        images.append({"id": int(d.image_id), "file_name": f"{d.image_id:06d}.png",
                       "width": size, "height": size})
        for j, (box, cid) in enumerate(d.annotations):
            cx, cy, w, h = box
            entry = {"id": ann_id, "image_id": int(d.image_id), "category_id": int(cid),
                     "bbox": [(cx - w / 2) * size, (cy - h / 2) * size, w * size, h * size],
                     "area": w * h * size * size, "iscrowd": 0}
            if confidence is not None:
                entry["confidence"] = float(confidence[(d.image_id, j)])
            anns.append(entry)
            ann_id += 1
    categories = [{"id": int(c), "name": names.get(c, f"class_{c}")} for c in cats]
    return {"images": images, "annotations": anns, "categories": categories}


def from_coco(coco, images=None):
    """Annotation-only AnnotatedImage list (pixels from ``images`` if given)."""
    by_image = {im["id"]: [] for im in coco["images"]}
    sizes = {im["id"]: (im.get("width", 32), im.get("height", 32)) for im in coco["images"]}
    for a in coco["annotations"]:
        w_img, h_img = sizes[a["image_id"]]
        x, y, w, h = a["bbox"]
        box = ((x + w / 2) / w_img, (y + h / 2) / h_img, w / w_img, h / h_img)
        by_image[a["image_id"]].append((box, int(a["category_id"])))
    out = []
    for iid, anns in by_image.items():
        pixels = images[iid] if images is not None else None
        out.append(AnnotatedImage(pixels, anns, int(iid)))
    return out


def save_dataset(dataset, path, spec=None):
    """COCO JSON at ``path`` plus pixels in ``path + '.npz'``."""
    with open(path, "w") as fh:
        json.dump(to_coco(dataset, spec), fh)
    np.savez_compressed(str(path) + ".npz", ids=np.array([d.image_id for d in dataset]),
                        pixels=stack_images(dataset) if dataset else np.zeros((0, 3, 1, 1)))


def load_dataset(path):
    with open(path) as fh:
        coco = json.load(fh)
    with np.load(str(path) + ".npz") as z:
        pixels = dict(zip(z["ids"].tolist(), z["pixels"]))
    return from_coco(coco, pixels)


def with_cooccurrence(spec, bias):
    return replace(spec, cooccurrence=np.asarray(bias, dtype=np.float64))
