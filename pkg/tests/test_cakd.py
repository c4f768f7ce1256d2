import numpy as np
import pytest

from incdet import losses
from incdet.cakd import (KdConfig, TeacherPair, TeacherTargets, cakd_loss, cakd_terms, cls_kd_loss,
                         cross_head_features, focal_weight, reg_kd_loss)
from incdet.detector import Architecture, DetectorModel, TextPrototypes, encode_image
from incdet.tensor import DimensionError, Tensor


def _model(seed, classes):
    m = DetectorModel.initialize(seed=seed)
    m.add_prototypes(TextPrototypes.synthetic(classes, 16, 0))
    return m


@pytest.fixture
def images(rng):
    return rng.random((2, 3, 32, 32))


def one_cell(v):
    return np.asarray(v, dtype=np.float64).reshape(-1, 1, 1)


class TestCrossHead:
    def test_own_neck_reproduces_teacher(self, images):
        teacher = _model(0, [1])
        neck = encode_image(teacher, images)
        e, b = cross_head_features(neck, teacher)
        np.testing.assert_array_equal(e.data, teacher.embed_head(neck).data)

    def test_zero_features_zero_bias(self):
        teacher = _model(0, [1])
        e, _ = cross_head_features(Tensor(np.zeros((16, 8, 8))), teacher)
        assert not e.data.any()

    def test_gradient_only_to_student(self, images):
        student, teacher = _model(1, [1, 2]), _model(2, [1, 2])
        pair = TeacherPair(teacher, [1], _model(3, [2]), [2])
        cakd_loss(student, pair, images, KdConfig()).backward()
        assert student.params["backbone.conv1.weight"].grad is not None
        for m in (pair.old_teacher, pair.current_teacher):
            assert all(p.grad is None for p in m.params.values())

    def test_channel_mismatch(self):
        teacher = _model(0, [1])
        with pytest.raises(DimensionError):
            cross_head_features(Tensor(np.zeros((8, 8, 8))), teacher)


class TestFocalWeight:
    def test_max_logit(self):
        w = focal_weight(one_cell([0.2, -1.0, 0.7]))
        assert w[0, 0] == pytest.approx(1 / (1 + np.exp(-0.7)), abs=1e-15)
        assert w[0, 0] == pytest.approx(0.668, abs=5e-4)

    def test_background_suppressed(self):
        assert focal_weight(one_cell([-100.0, -100.0]))[0, 0] < 1e-40

    def test_single_class(self):
        assert focal_weight(one_cell([0.3]))[0, 0] == pytest.approx(1 / (1 + np.exp(-0.3)))

    def test_range(self, rng):
        w = focal_weight(rng.standard_normal((2, 5, 8, 8)) * 3)
        assert w.shape == (2, 8, 8) and np.all((w > 0) & (w < 1))


class TestClsKd:
    def test_identical(self, rng):
        e = rng.standard_normal((16, 8, 8))
        assert cls_kd_loss(e, Tensor(e), np.ones((8, 8))).item() == 0.0

    def test_hand_case(self):
        assert cls_kd_loss(one_cell([1, 0]), Tensor(one_cell([0, 1])), np.ones((1, 1))).item() == pytest.approx(2.0)

    def test_linear_in_weight(self, rng):
        e_t, e_s, w = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3)), rng.random((3, 3))
        a = cls_kd_loss(e_t, Tensor(e_s), w).item()
        assert cls_kd_loss(e_t, Tensor(e_s), 2 * w).item() == pytest.approx(2 * a, rel=1e-14)

    def test_mean_reduction(self, rng):
        e_t, e_s, w = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3)), rng.random((3, 3))
        assert cls_kd_loss(e_t, Tensor(e_s), w, "mean").item() == pytest.approx(
            cls_kd_loss(e_t, Tensor(e_s), w).item() / 9)

    def test_batch_is_averaged(self, rng):
        e_t, e_s, w = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 3, 3)), rng.random((2, 3, 3))
        per = [cls_kd_loss(e_t[i], Tensor(e_s[i]), w[i]).item() for i in range(2)]
        assert cls_kd_loss(e_t, Tensor(e_s), w).item() == pytest.approx(np.mean(per))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cls_kd_loss(np.zeros((2, 2, 2)), Tensor(np.zeros((3, 2, 2))), np.ones((2, 2)))


class TestRegKd:
    def test_identical(self, rng):
        b = rng.uniform(0.1, 0.9, (4, 3, 3))
        assert reg_kd_loss(b, Tensor(b), np.ones((3, 3))).item() == 0.0

    def test_disjoint(self):
        assert reg_kd_loss(one_cell([0.1, 0.1, 0.1, 0.1]), Tensor(one_cell([0.8, 0.8, 0.1, 0.1])),
                           np.ones((1, 1))).item() == 1.0

    def test_one_seventh(self):
        # corners (0,0,2,2) and (1,1,3,3) as centre form
        out = reg_kd_loss(one_cell([1, 1, 2, 2]), Tensor(one_cell([2, 2, 2, 2])), np.ones((1, 1))).item()
        assert out == pytest.approx(1 - 1 / 7, abs=1e-12)

    def test_degenerate_box_counted(self):
        before = losses.diagnostics["degenerate_box"]
        out = reg_kd_loss(one_cell([0.5, 0.5, 0.0, 0.2]), Tensor(one_cell([0.5, 0.5, 0.2, 0.2])), np.ones((1, 1)))
        assert out.item() == 1.0 and losses.diagnostics["degenerate_box"] == before + 1

    def test_giou_variant(self):
        out = reg_kd_loss(one_cell([1, 1, 2, 2]), Tensor(one_cell([2, 2, 2, 2])), np.ones((1, 1)),
                          variant="giou").item()
        # enclosing box 3x3 = 9, union 7: GIoU = 1/7 - 2/9
        assert out == pytest.approx(1 - (1 / 7 - 2 / 9), abs=1e-12)


class TestCombined:
    def test_self_distillation_zero(self, images):
        m = _model(0, [1, 2, 3, 4])
        pair = TeacherPair(m.clone(), [1, 2], m.clone(), [3, 4])
        terms = cakd_terms(m, pair, images, KdConfig())
        assert set(terms) == {"old_cls", "old_reg", "cur_cls", "cur_reg"}
        assert all(v.item() == 0.0 for v in terms.values())

    def test_alpha_zero_is_regression_only(self, images):
        student = _model(1, [1, 2])
        pair = TeacherPair(_model(2, [1]), [1], _model(3, [2]), [2])
        full = cakd_terms(student, pair, images, KdConfig())
        only = cakd_loss(student, pair, images, KdConfig(alpha=0.0)).item()
        assert only == pytest.approx(full["old_reg"].item() + full["cur_reg"].item(), rel=1e-12)

    def test_beta_zero_one_cell(self):
        t = DetectorModel.initialize(Architecture(), seed=0)
        t.add_prototypes(TextPrototypes.synthetic([1], 16, 0))
        neck = Tensor(np.zeros((1, 16, 8, 8)))
        e_s, _ = cross_head_features(neck, t)
        # the terms reduce to the classification example when targets are hand-set
        tt = TeacherTargets(e_s.data + one_cell(np.r_[1.0, np.zeros(15)])[None] * 0 + 0.0,
                            np.zeros((1, 8, 8)), np.zeros((1, 4, 8, 8)))
        tt.embeddings[0, :, 0, 0] = e_s.data[0, :, 0, 0] + np.r_[1.0, -1.0, np.zeros(14)]
        tt.weights[0, 0, 0] = 1.0
        pair = TeacherPair(t, [1], None, [])
        out = cakd_loss(t, pair, np.zeros((1, 3, 32, 32)), KdConfig(alpha=3.0, beta=0.0),
                        student_neck=neck, targets={"old": tt}).item()
        assert out == pytest.approx(3.0 * 2.0, abs=1e-12)

    def test_route_toggles(self, images):
        student = _model(1, [1, 2])
        pair = TeacherPair(_model(2, [1]), [1], _model(3, [2]), [2])
        assert set(cakd_terms(student, pair, images, KdConfig(use_current=False))) == {"old_cls", "old_reg"}

    def test_precomputed_targets_match(self, images):
        student = _model(1, [1, 2])
        pair = TeacherPair(_model(2, [1]), [1], _model(3, [2]), [2])
        targets = {"old": TeacherTargets.compute(pair.old_teacher, images, [1]),
                   "cur": TeacherTargets.compute(pair.current_teacher, images, [2])}
        a = cakd_loss(student, pair, images, KdConfig()).item()
        b = cakd_loss(student, pair, images, KdConfig(), targets=targets).item()
        assert a == b

    def test_overlapping_teacher_classes(self):
        with pytest.raises(ValueError):
            TeacherPair(_model(0, [1]), [1], _model(1, [1]), [1])

    @pytest.mark.parametrize("kw", [{"alpha": -1}, {"reduction": "max"}, {"iou_loss": "diou"}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            KdConfig(**kw)
