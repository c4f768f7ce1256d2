"""Time the compiled kernels against the numpy fallback.

Both backends are imported directly, so the INCDET_PURE_PYTHON switch does
not matter here. Every case also checks that the two outputs agree exactly.

    python benchmarks/bench_kernels.py --repeat 5 --json bench.json
"""

import argparse
import json
import sys
import timeit

import numpy as np

from incdet._kernels import _pykernels

try:
    from incdet._kernels import _ckernels
except ImportError:
    _ckernels = None


def _boxes(rng, n):
    xy = rng.uniform(0, 28, (n, 2))
    wh = rng.uniform(3, 12, (n, 2))
    return np.ascontiguousarray(np.concatenate([xy, xy + wh], axis=1))


def _graph(rng, n):
    a = rng.integers(0, 50, (n, n)) * (rng.random((n, n)) < 0.3)
    a = np.triu(a, 1)
    return (a + a.T).astype(np.float64)


def cases(rng):
    x = rng.standard_normal((16, 16, 16, 16))
    cols = _pykernels.im2col(x, 3, 3, 1, 1)
    iou = rng.random((300, 80))
    labels = rng.permutation(np.repeat(np.arange(4), 20))
    adj = _graph(rng, 80)
    boxes = _boxes(rng, 500)
    return {
        "im2col 16x16x16x16 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 16x16x16x16 k3": lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1),
        "nms 500 boxes": lambda k: k.nms(boxes, 0.5),
        "greedy_match 300x80": lambda k: k.greedy_match(iou, 0.5),
        "swap_refine 80 nodes / 4 parts": lambda k: k.swap_refine(adj, labels, 4),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def run(repeat, seed=0):
    rows = []
    for name, fn in cases(np.random.default_rng(seed)).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=repeat))
        row = {"kernel": name, "python_s": py, "cython_s": None, "speedup": None, "identical": None}
        if _ckernels is not None:
            row["identical"] = bool(_same(fn(_pykernels), fn(_ckernels)))
            cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=repeat))
            row.update(cython_s=cy, speedup=py / cy)
        rows.append(row)
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timing repetitions (best is kept)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", help="write results to this file")
    args = parser.parse_args(argv)

    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    rows = run(args.repeat, args.seed)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s} identical")
    for r in rows:
        cy = f"{1e3 * r['cython_s']:10.2f}" if r["cython_s"] is not None else f"{'-':>10s}"
        sp = f"{r['speedup']:8.1f}" if r["speedup"] is not None else f"{'-':>8s}"
        print(f"{r['kernel']:34s} {1e3 * r['python_s']:10.2f} {cy} {sp} {r['identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
