"""Kernel-level Fisher importance and selective fine-tuning.

Importance of a conv kernel (one output-channel filter) is the mean over
samples of its summed squared loss gradients. Kernels whose importance for
the new task most exceeds their accumulated importance for earlier tasks are
the ones left trainable; every other kernel is frozen bit-for-bit.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .detector import KernelId


@dataclass
class IksConfig:
    rho: float = 1.0
    ratio_base: float = 0.20
    ratio_incremental: float = 0.12
    record: str = "start"  # ledger entry from the stage-start model or the trained one ("end")

    def __post_init__(self):
        if self.record not in ("start", "end"):
            raise ValueError(f"unknown record point {self.record!r}")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        for r in (self.ratio_base, self.ratio_incremental):
            if not 0.0 < r <= 1.0:
                raise ValueError(f"selection ratio {r} outside (0, 1]")


@dataclass
class ImportanceLedger:
    """Per-task kernel importances, ``records[t][KernelId] = I_t``."""

    records: dict = field(default_factory=dict)

    def add(self, t, importance):
        if any(v < 0 for v in importance.values()):
            raise ValueError("importance values must be non-negative")
        self.records[int(t)] = dict(importance)

    def history(self, before=None):
        """Per-kernel sum of importances of tasks ``< before`` (all if None)."""
        total = {}
        for t, rec in self.records.items():
            if before is not None and t >= before:
                continue
            for k, v in rec.items():
                total[k] = total.get(k, 0.0) + v
        return total

    def __len__(self):
        return len(self.records)

    def to_triples(self):
        return [[t, k.layer_name, k.out_channel, float(v)]
                for t in sorted(self.records) for k, v in sorted(self.records[t].items())]

    @classmethod
    def from_triples(cls, triples):
        led = cls()
        for t, layer, ch, v in triples:
            led.records.setdefault(int(t), {})[KernelId(layer, int(ch))] = float(v)
        return led

    def to_json(self):
        return json.dumps(self.to_triples())

    @classmethod
    def from_json(cls, text):
        return cls.from_triples(json.loads(text))


def _weight_names(model):
    return [(spec.name, f"{spec.name}.weight") for spec in model.conv_layers]


def kernel_importance(model, dataset, loss_fn):
    """Fisher-style importance per kernel.

    ``loss_fn(model, sample)`` returns the scalar loss Tensor for one sample;
    gradients are reset before every sample.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("kernel importance needs a non-empty dataset")
    acc = {name: np.zeros(model.params[w].shape[0]) for name, w in _weight_names(model)}
    for sample in dataset:
        model.zero_grad()
        loss_fn(model, sample).backward()
        for name, w in _weight_names(model):
            g = model.params[w].grad
            if g is not None:
                acc[name] += (g * g).reshape(g.shape[0], -1).sum(axis=1)
    model.zero_grad()
    n = len(dataset)
    return {KernelId(name, c): float(v / n) for name, vals in acc.items() for c, v in enumerate(vals)}


def differential_importance(current, ledger, rho, t=None):
    """``I_t - rho * sum_{i<t} I_i`` per kernel (may be negative)."""
    hist = ledger.history(before=t)
    return {k: v - rho * hist.get(k, 0.0) for k, v in current.items()}


def n_selected(ratio, n):
    # rounding guards against ratio*n landing a hair above an integer
    return min(n, math.ceil(round(ratio * n, 9)))


def select_top_k(delta, ratio):
    """The ``ceil(ratio * n)`` kernels with largest ``delta``, sorted by id.

    Ties go to the smaller KernelId.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside (0, 1]")
    k = n_selected(ratio, len(delta))
    ranked = sorted(delta.items(), key=lambda kv: (-kv[1], kv[0]))
    return sorted(kid for kid, _ in ranked[:k])


def apply_freeze_mask(model, selected):
    """Restrict future optimizer steps to the ``selected`` kernels.

    Sets ``model.update_masks`` for every conv weight. Biases and parameters
    outside conv layers (eta, zeta, prototypes) stay fully trainable.
    """
    selected = set(selected)
    known = set(model.kernel_ids())
    unknown = selected - known
    if unknown:
        raise KeyError(f"unknown kernel ids: {sorted(map(str, unknown))}")
    masks = {}
    for spec in model.conv_layers:
        keep = np.array([KernelId(spec.name, c) in selected for c in range(spec.c_out)], dtype=np.float64)
        masks[f"{spec.name}.weight"] = keep.reshape(-1, 1, 1, 1)
    model.update_masks = masks
    return masks


def clear_freeze_mask(model):
    model.update_masks = {}


def frozen_snapshot(model):
    """Copies of the frozen slices of every masked parameter."""
    snap = {}
    for name, m in model.update_masks.items():
        frozen = np.broadcast_to(m, model.params[name].shape) == 0
        snap[name] = (frozen, model.params[name].data[frozen].copy())
    return snap


def snapshot_unchanged(model, snap):
    return all(np.array_equal(model.params[n].data[f], v) for n, (f, v) in snap.items())
