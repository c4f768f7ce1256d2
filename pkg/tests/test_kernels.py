"""Both kernel backends against independent references and each other."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incdet import _kernels
from incdet._kernels import _pykernels


def brute_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_nms(boxes, thresh):
    keep = []
    for i in range(len(boxes)):
        if all(brute_iou(boxes[i], boxes[k]) <= thresh for k in keep):
            keep.append(i)
    return keep


def random_boxes(rng, n):
    xy = rng.uniform(0, 20, (n, 2))
    return np.ascontiguousarray(np.concatenate([xy, xy + rng.uniform(1, 8, (n, 2))], axis=1))


class TestIm2Col:
    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)])
    def test_adjoint_identity(self, kernels, rng, stride, pad, k):
        # <im2col(x), c> == <x, col2im(c)>
        x = rng.standard_normal((2, 3, 6, 6))
        cols = kernels.im2col(x, k, k, stride, pad)
        c = rng.standard_normal(cols.shape)
        back = kernels.col2im(c, x.shape, k, k, stride, pad)
        assert np.isclose((cols * c).sum(), (x * back).sum(), rtol=1e-12)

    def test_patch_layout(self, kernels):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        cols = kernels.im2col(x, 2, 2, 2, 0)
        np.testing.assert_array_equal(cols[0, :, 0], [0, 1, 4, 5])
        np.testing.assert_array_equal(cols[0, :, 3], [10, 11, 14, 15])


class TestNms:
    def test_matches_brute_force(self, kernels, rng):
        for _ in range(30):
            boxes = random_boxes(rng, int(rng.integers(0, 25)))
            assert list(kernels.nms(boxes, 0.4)) == brute_nms(boxes, 0.4)

    def test_identical_boxes_keep_first(self, kernels):
        b = np.ascontiguousarray(np.tile([0.0, 0.0, 1.0, 1.0], (3, 1)))
        assert list(kernels.nms(b, 0.5)) == [0]


class TestGreedyMatch:
    def test_highest_iou_unmatched_gt(self, kernels):
        iou = np.array([[0.6, 0.9], [0.7, 0.8], [0.55, 0.1]])
        np.testing.assert_array_equal(kernels.greedy_match(iou, 0.5), [True, True, False])

    def test_tie_goes_to_lower_column(self, kernels):
        iou = np.array([[0.7, 0.7], [0.7, 0.0]])
        # row 0 takes column 0, so row 1 has nothing left above threshold
        np.testing.assert_array_equal(kernels.greedy_match(iou, 0.5), [True, False])

    def test_threshold_inclusive(self, kernels):
        assert kernels.greedy_match(np.array([[0.5]]), 0.5)[0]


def brute_min_swap(adj, labels):
    """Exhaustive check that no single swap lowers the cut."""
    def cut(lab):
        return sum(adj[i, j] for i, j in itertools.combinations(range(len(lab)), 2) if lab[i] != lab[j])
    base = cut(labels)
    for i, j in itertools.combinations(range(len(labels)), 2):
        if labels[i] != labels[j]:
            lab = labels.copy()
            lab[i], lab[j] = lab[j], lab[i]
            if cut(lab) < base - 1e-9:
                return False
    return True


class TestSwapRefine:
    def test_local_optimum_and_sizes(self, kernels, rng):
        for _ in range(20):
            n = int(rng.integers(4, 12))
            a = np.triu(rng.integers(0, 6, (n, n)), 1).astype(np.float64)
            a = a + a.T
            labels = rng.permutation(np.arange(n) % 3)
            out = kernels.swap_refine(a, labels, 3)
            np.testing.assert_array_equal(np.bincount(out, minlength=3), np.bincount(labels, minlength=3))
            assert brute_min_swap(a, out)

    def test_does_not_mutate_input(self, kernels):
        labels = np.array([0, 1, 0, 1])
        a = np.ones((4, 4)) - np.eye(4)
        kernels.swap_refine(a, labels, 2)
        np.testing.assert_array_equal(labels, [0, 1, 0, 1])


class TestBackendEquality:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bit_identical(self, seed):
        from incdet._kernels import _ckernels

        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 8, 8))
        for stride, pad in ((1, 1), (2, 1), (2, 0)):
            a = _pykernels.im2col(x, 3, 3, stride, pad)
            assert np.array_equal(a, _ckernels.im2col(x, 3, 3, stride, pad))
            c = rng.standard_normal(a.shape)
            assert np.array_equal(_pykernels.col2im(c, x.shape, 3, 3, stride, pad),
                                  _ckernels.col2im(c, x.shape, 3, 3, stride, pad))
        boxes = random_boxes(rng, 40)
        assert np.array_equal(_pykernels.nms(boxes, 0.5), _ckernels.nms(boxes, 0.5))
        iou = rng.random((20, 10))
        assert np.array_equal(_pykernels.greedy_match(iou, 0.5), _ckernels.greedy_match(iou, 0.5))
        adj = np.triu(rng.integers(0, 9, (12, 12)), 1).astype(np.float64)
        adj = adj + adj.T
        labels = rng.permutation(np.arange(12) % 3)
        assert np.array_equal(_pykernels.swap_refine(adj, labels, 3), _ckernels.swap_refine(adj, labels, 3))

    @pytest.fixture(autouse=True)
    def _need_compiled(self, compiled):
        pass


def test_backend_flag():
    assert _kernels.BACKEND in ("python", "cython")


def test_pure_python_switch():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-c", "from incdet import _kernels; print(_kernels.BACKEND)"],
                         env={"INCDET_PURE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"
