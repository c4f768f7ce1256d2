"""Leakage-free stage splits of a COCO-format annotation set.

Categories that often appear together are clustered into the same stage by a
balanced min-cut over the image co-occurrence graph. Images whose categories
still span several stages are given to one of them at random, so no image is
ever seen in two stages.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .rng import substream
from .synth import ConfigError

log = logging.getLogger(__name__)

DEFAULT_RESTARTS = 16


class AnnotationParseError(ValueError):
    """Malformed annotation JSON; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} at byte offset {offset}")
        self.offset = offset
        self.path = path


class IntegrityError(ValueError):
    """Annotation refers to a category or image that is not declared."""


class ManifestWriteError(OSError):
    pass


# ------------------------------------------------------------------ loading


def parse_annotations(data, path=None):
    """Parse COCO JSON from ``bytes``/``str``; errors carry a byte offset."""
    raw = data.encode("utf-8") if isinstance(data, str) else bytes(data)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise AnnotationParseError(f"invalid UTF-8 ({e.reason})", e.start, path) from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode("utf-8"))
        raise AnnotationParseError(e.msg, offset, path) from e
    if not isinstance(doc, dict):
        raise AnnotationParseError("top level must be an object", 0, path)
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key, []), list):
            raise IntegrityError(f"'{key}' must be a list")
        doc.setdefault(key, [])
    return doc


def load_annotations(path):
    with open(path, "rb") as fh:
        return parse_annotations(fh.read(), path=str(path))


def check_integrity(dataset):
    """Raise IntegrityError on dangling category or image references."""
    cats = {c["id"] for c in dataset["categories"]}
    images = {im["id"] for im in dataset["images"]}
    for a in dataset["annotations"]:
        if a["category_id"] not in cats:
            raise IntegrityError(f"annotation {a.get('id')} references unknown category {a['category_id']}")
        if a["image_id"] not in images:
            raise IntegrityError(f"annotation {a.get('id')} references unknown image {a['image_id']}")


def image_categories(dataset):
    """Image id -> set of annotated category ids, for every declared image."""
    out = {im["id"]: set() for im in dataset["images"]}
    for a in dataset["annotations"]:
        out[a["image_id"]].add(a["category_id"])
    return out


# ---------------------------------------------------------- co-occurrence


@dataclass
class CoOccurrenceGraph:
    categories: list
    A: np.ndarray

    def index(self):
        return {c: i for i, c in enumerate(self.categories)}


def build_cooccurrence(dataset, chunk=20000):
    """``A[i, j]`` = number of images holding both category i and j.

    The diagonal is left at zero. Counting goes through a 0/1 image-by-category
    incidence matrix processed in chunks of images.
    """
    check_integrity(dataset)
    cats = sorted(c["id"] for c in dataset["categories"])
    n = len(cats)
    pos = {c: i for i, c in enumerate(cats)}
    img_pos = {im["id"]: i for i, im in enumerate(dataset["images"])}
    A = np.zeros((n, n), dtype=np.int64)
    if dataset["annotations"] and n:
        rows = np.fromiter((img_pos[a["image_id"]] for a in dataset["annotations"]), dtype=np.int64)
        cols = np.fromiter((pos[a["category_id"]] for a in dataset["annotations"]), dtype=np.int64)
        for lo in range(0, len(img_pos), chunk):
            sel = (rows >= lo) & (rows < lo + chunk)
            x = np.zeros((min(chunk, len(img_pos) - lo), n))
            x[rows[sel] - lo, cols[sel]] = 1.0
            A += np.rint(x.T @ x).astype(np.int64)
    np.fill_diagonal(A, 0)
    return CoOccurrenceGraph(cats, A)


# -------------------------------------------------------------- clustering


def cut_weight(A, labels):
    """Total weight of edges whose endpoints sit in different parts."""
    labels = np.asarray(labels)
    cross = labels[:, None] != labels[None, :]
    return float(np.triu(np.asarray(A, dtype=np.float64) * cross, 1).sum())


def _check_sizes(n, n_stages, sizes):
    sizes = [int(s) for s in sizes]
    if n_stages < 1 or len(sizes) != n_stages:
        raise ConfigError(f"{n_stages} stages but {len(sizes)} sizes given")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"stage sizes must be positive, got {sizes}")
    if sum(sizes) != n:
        raise ConfigError(f"stage sizes {sizes} sum to {sum(sizes)}, graph has {n} categories")
    return sizes


def partition_labels(A, sizes, rng_seed, restarts=DEFAULT_RESTARTS):
    """Best-of-``restarts`` swap-refined balanced labelling and its cut weight."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    A = A - np.diag(np.diag(A))
    base = np.repeat(np.arange(len(sizes)), sizes)
    best, best_cut = None, np.inf
    for r in range(restarts):
        labels = substream(rng_seed, "partition", r).permutation(base)
        labels = _kernels.swap_refine(A, labels, len(sizes))
        cut = cut_weight(A, labels)
        if cut < best_cut - 1e-9:
            best, best_cut = labels, cut
    return np.asarray(best), best_cut


def partition_categories(graph, n_stages, sizes, rng_seed, restarts=DEFAULT_RESTARTS):
    """Category sets, one per stage, with exactly ``sizes`` members each."""
    sizes = _check_sizes(len(graph.categories), n_stages, sizes)
    labels, _ = partition_labels(graph.A, sizes, rng_seed, restarts)
    return [{graph.categories[i] for i in np.flatnonzero(labels == s)} for s in range(n_stages)]


def random_partition_cut(A, sizes, rng):
    return cut_weight(A, rng.permutation(np.repeat(np.arange(len(sizes)), sizes)))


# -------------------------------------------------------------- assignment


@dataclass
class StagePartition:
    categories: list  # stage -> set of category ids
    images: list  # stage -> set of image ids
    seed: int = 0
    excluded: int = 0  # images without any annotated category

    def __post_init__(self):
        if len(self.categories) != len(self.images):
            raise ValueError("one image set per category set is required")

    @property
    def n_stages(self):
        return len(self.categories)

    def stage_of_category(self):
        return {c: s for s, cs in enumerate(self.categories) for c in cs}

    def to_dict(self):
        return {"seed": self.seed, "excluded": self.excluded,
                "categories": [sorted(c) for c in self.categories],
                "images": [sorted(i) for i in self.images]}


def _stage_lookup(dataset, category_partition):
    owner = {}
    for s, cs in enumerate(category_partition):
        for c in cs:
            if c in owner:
                raise ConfigError(f"category {c} assigned to stages {owner[c]} and {s}")
            owner[c] = s
    missing = {c["id"] for c in dataset["categories"]} - set(owner)
    if missing:
        raise ConfigError(f"partition does not cover categories {sorted(missing)}")
    return owner


def assign_overlap_images(dataset, category_partition, rng_seed):
    """Give every annotated image to exactly one stage.

    Images whose categories span several stages pick one of those stages
    uniformly from the seeded ``assignment`` stream, in ascending image-id
    order; single-stage images need no draw.
    """
    check_integrity(dataset)
    owner = _stage_lookup(dataset, category_partition)
    rng = substream(rng_seed, "assignment")
    images = [set() for _ in category_partition]
    excluded = 0
    for iid, cats in sorted(image_categories(dataset).items()):
        stages = sorted({owner[c] for c in cats})
        if not stages:
            excluded += 1
            continue
        s = stages[0] if len(stages) == 1 else stages[int(rng.integers(len(stages)))]
        images[s].add(iid)
    if excluded:
        log.warning("%d images without annotations were left out", excluded)
    return StagePartition([set(c) for c in category_partition], images, int(rng_seed), excluded)


def naive_partition(dataset, category_partition):
    """Each image joins every stage that holds one of its categories."""
    owner = _stage_lookup(dataset, category_partition)
    images = [set() for _ in category_partition]
    excluded = 0
    for iid, cats in image_categories(dataset).items():
        if not cats:
            excluded += 1
        for s in {owner[c] for c in cats}:
            images[s].add(iid)
    return StagePartition([set(c) for c in category_partition], images, 0, excluded)


def leakage_stats(dataset, partition, graph=None):
    """Stages-per-image statistics and cut weight of a (possibly leaky) split."""
    counts = {}
    for imgs in partition.images:
        for iid in imgs:
            counts[iid] = counts.get(iid, 0) + 1
    per = np.array(list(counts.values()), dtype=np.float64)
    graph = graph or build_cooccurrence(dataset)
    pos = graph.index()
    labels = np.zeros(len(graph.categories), dtype=np.int64)
    for s, cs in enumerate(partition.categories):
        for c in cs:
            labels[pos[c]] = s
    return {
        "n_stages": partition.n_stages,
        "n_images": int(len(per)),
        "avg_stages_per_image": float(per.mean()) if len(per) else 0.0,
        "multi_stage_fraction": float((per > 1).mean()) if len(per) else 0.0,
        "cut_weight": cut_weight(graph.A, labels),
        "images_per_stage": [len(i) for i in partition.images],
        "excluded": partition.excluded,
    }


# ---------------------------------------------------------------- manifests


def stage_manifest(partition, dataset, s):
    """COCO dict for stage ``s``: its images, filtered to its categories."""
    cats, imgs = partition.categories[s], partition.images[s]
    return {
        "images": [im for im in dataset["images"] if im["id"] in imgs],
        "annotations": [a for a in dataset["annotations"]
                        if a["image_id"] in imgs and a["category_id"] in cats],
        "categories": [c for c in dataset["categories"] if c["id"] in cats],
    }


def emit_stage_manifests(partition, dataset, out_dir):
    """Write ``stage_<k>.json`` per stage; returns the paths in stage order."""
    paths = []
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise ManifestWriteError(f"cannot create {out_dir}: {e.strerror}") from e
    for s in range(partition.n_stages):
        path = os.path.join(out_dir, f"stage_{s + 1}.json")
        try:
            with open(path, "w") as fh:
                json.dump(stage_manifest(partition, dataset, s), fh, sort_keys=True)
        except OSError as e:
            raise ManifestWriteError(f"cannot write {path}: {e.strerror}") from e
        paths.append(path)
    return paths


def partition_from_manifests(manifests, seed=0):
    """Rebuild a StagePartition from parsed per-stage manifests."""
    return StagePartition([{c["id"] for c in m["categories"]} for m in manifests],
                          [{im["id"] for im in m["images"]} for m in manifests], seed)


# --------------------------------------------------------- synthetic input


def synthetic_annotations(n_images, n_categories, n_groups, rng_seed, per_image=(1, 4), p_within=0.85):
    """COCO dict whose categories co-occur mostly inside ``n_groups`` groups."""
    rng = substream(rng_seed, "data", "loco")
    group = np.arange(n_categories) % n_groups
    members = [np.flatnonzero(group == g) for g in range(n_groups)]
    images, anns = [], []
    ann_id = 1
    for iid in range(1, n_images + 1):
        images.append({"id": iid, "file_name": f"{iid:012d}.jpg", "width": 640, "height": 480})
        home = int(rng.integers(n_groups))
        for _ in range(int(rng.integers(per_image[0], per_image[1] + 1))):
            pool = members[home] if rng.random() < p_within else np.arange(n_categories)
            cat = int(rng.choice(pool)) + 1
            x, y = rng.uniform(0, 500), rng.uniform(0, 350)
            w, h = rng.uniform(10, 140), rng.uniform(10, 130)
            anns.append({"id": ann_id, "image_id": iid, "category_id": cat,
                         "bbox": [round(x, 2), round(y, 2), round(w, 2), round(h, 2)],
                         "area": round(w * h, 2), "iscrowd": 0})
            ann_id += 1
    cats = [{"id": c + 1, "name": f"category_{c + 1}"} for c in range(n_categories)]
    return {"images": images, "annotations": anns, "categories": cats}
