import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miaod import autodiff as ad
from miaod.autodiff import Tensor, grad_check
from miaod.detector import AssignmentResult
from miaod.losses import (LabeledBatch, LossConfig, detection_loss, discrepancy, focal_loss,
                          image_cls_loss, mil_image_score, objective_max, objective_min,
                          pseudo_labels, smooth_l1, weighted_discrepancy)
from oracles import RandomHeads, focal_reference, mil_score_bruteforce, smooth_l1_reference


def random_targets(rng, b, n, c) -> AssignmentResult:
    flags = rng.choice([1, 0, -1], size=(b, n), p=[0.3, 0.5, 0.2])
    y_cls = np.zeros((b, n, c))
    cls = rng.integers(0, c, size=(b, n))
    for i in range(b):
        for j in range(n):
            if flags[i, j] == 1:
                y_cls[i, j, cls[i, j]] = 1.0
    y_loc = np.where((flags == 1)[..., None], rng.normal(size=(b, n, 4)), 0.0)
    return AssignmentResult(y_cls, y_loc, flags, np.where(flags == 1, 0, -1))


def random_labels(rng, b, c):
    return rng.integers(0, 2, size=(b, c)).astype(np.float64)


class TestFocal:
    def test_closed_form_single_positive(self):
        p = np.full((1, 3), 0.5)
        y = np.array([[1.0, 0.0, 0.0]])
        expected = 0.25 * 0.25 * math.log(2) + 2 * 0.75 * 0.25 * math.log(2)
        assert float(focal_loss(p, y, np.array([1])).data) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.3033, abs=1e-4)

    def test_perfect_prediction_vanishes(self):
        y = np.array([[1.0, 0.0], [0.0, 0.0]])
        p = np.where(y == 1, 1 - 1e-9, 1e-9)
        assert float(focal_loss(p, y, np.array([1, 0])).data) < 1e-12

    def test_gamma_zero_is_half_bce(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, size=(5, 3))
        y = (rng.random((5, 3)) < 0.3).astype(float)
        flags = np.array([1, 0, 0, 1, 0])
        bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum() / 2
        got = float(focal_loss(p, y, flags, alpha=0.5, gamma=0.0).data)
        assert got == pytest.approx(0.5 * bce, rel=1e-13)

    def test_matches_loop_reference_with_ignores(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.01, 0.99, size=(6, 3))
        y = np.zeros((6, 3))
        y[0, 2] = y[4, 1] = 1
        flags = np.array([1, -1, 0, -1, 1, 0])
        got = float(focal_loss(p, y, flags).data)
        assert got == pytest.approx(focal_reference(p, y, flags), rel=1e-13)


class TestSmoothL1:
    @pytest.mark.parametrize("d, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)])
    def test_values(self, d, expected):
        pred = np.array([[d, 0.0, 0.0, 0.0]])
        assert float(smooth_l1(pred, np.zeros((1, 4)), np.array([1])).data) == pytest.approx(expected)

    def test_only_positives_count(self):
        rng = np.random.default_rng(3)
        pred, target = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        flags = np.array([1, 0, -1, 1, 0])
        got = float(smooth_l1(pred, target, flags).data)
        assert got == pytest.approx(smooth_l1_reference(pred, target, flags), rel=1e-13)


class TestDetectionLoss:
    def test_perfect_heads(self):
        y = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        t = AssignmentResult(y, np.zeros((1, 2, 4)), np.array([[1, 0]]), np.array([[0, -1]]))
        p = Tensor(np.where(y == 1, 1 - 1e-9, 1e-9))
        from miaod.detector import ForwardOutput
        out = ForwardOutput(p, p, Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros(1)))
        assert float(detection_loss(out, t).data) < 1e-12

    def test_one_perfect_head_leaves_the_other(self):
        from miaod.detector import ForwardOutput
        y = np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]])
        flags = np.array([[1, 0]])
        t = AssignmentResult(y, np.zeros((1, 2, 4)), flags, np.array([[0, -1]]))
        perfect = Tensor(np.where(y == 1, 1.0, 0.0))
        half = Tensor(np.full(y.shape, 0.5))
        out = ForwardOutput(perfect, half, Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros(y.shape)), Tensor(np.zeros(1)))
        alone = focal_loss(half, y, flags)
        assert float(detection_loss(out, t).data) == pytest.approx(float(alone.data), abs=1e-10)

    def test_component_sum(self):
        rng = np.random.default_rng(5)
        heads = RandomHeads(rng, 2, 6, 3)
        t = random_targets(rng, 2, 6, 3)
        out = heads.output()
        expected = sum(
            focal_reference(out.y_f1.data[b], t.y_cls[b], t.flags[b])
            + focal_reference(out.y_f2.data[b], t.y_cls[b], t.flags[b])
            + smooth_l1_reference(out.y_fr.data[b], t.y_loc[b], t.flags[b])
            for b in range(2))
        assert float(detection_loss(out, t).data) == pytest.approx(expected, rel=1e-12)


class TestDiscrepancy:
    def test_identity(self):
        y = np.random.default_rng(0).random((4, 3))
        l_dis, u = discrepancy(y, y)
        assert float(l_dis.data) == 0.0
        np.testing.assert_array_equal(u.data, np.zeros(4))

    def test_single_instance(self):
        _, u = discrepancy(np.array([[0.9, 0.1]]), np.array([[0.5, 0.5]]))
        assert u.data[0] == pytest.approx(0.8, abs=1e-15)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((5, 3)), rng.random((5, 3))
        assert float(discrepancy(a, b)[0].data) == float(discrepancy(b, a)[0].data)

    def test_sum_mode(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((5, 3)), rng.random((5, 3))
        total = float(discrepancy(a, b, LossConfig(instance_norm="sum"))[0].data)
        assert total == pytest.approx(np.abs(a - b).sum(), rel=1e-14)
        mean = float(discrepancy(a, b)[0].data)
        assert mean == pytest.approx(total / 5, rel=1e-14)

    def test_weighted_unit_weights_exact(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((2, 7, 3)), rng.random((2, 7, 3))
        plain = discrepancy(a, b)
        weighted = weighted_discrepancy(a, b, np.ones((2, 7, 3)))
        assert abs(float(plain[0].data) - float(weighted[0].data)) <= 1e-15
        np.testing.assert_allclose(weighted[1].data, plain[1].data, rtol=0, atol=1e-15)

    def test_weighted_zero(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((3, 2)), rng.random((3, 2))
        assert float(weighted_discrepancy(a, b, np.zeros((3, 2)))[0].data) == 0.0

    def test_weighted_closed_form(self):
        f1 = np.array([[0.7, 0.3]])
        f2 = np.array([[0.3, 0.5]])
        _, u = weighted_discrepancy(f1, f2, np.array([[0.5, 1.0]]))
        assert u.data[0] == pytest.approx(0.4, abs=1e-15)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            weighted_discrepancy(np.ones((1, 2)), np.ones((1, 2)), -np.ones((1, 2)))


class TestMilScore:
    def test_degenerate_single_entry(self):
        s = mil_image_score(np.array([[3.0]]), np.array([[0.2]]), np.array([[0.7]]))
        assert s.data[0, 0] == 1.0

    def test_closed_form_two_by_two(self):
        fmil = np.array([[2.0, 0.0], [0.0, 0.0]])
        avg = np.array([[1.0, 0.0], [0.0, 0.0]])
        s = mil_image_score(fmil, avg, avg).data
        expected = (math.exp(2) / (math.exp(2) + 1)) * (math.e / (math.e + 1))
        assert s[0, 0] == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.6439, abs=1e-4)

    @pytest.mark.parametrize("n", range(1, 6))
    @pytest.mark.parametrize("c", range(1, 6))
    def test_matches_bruteforce(self, n, c):
        rng = np.random.default_rng(100 * n + c)
        fmil, f1, f2 = rng.normal(size=(n, c)) * 2, rng.random((n, c)), rng.random((n, c))
        got = mil_image_score(fmil, f1, f2).data
        np.testing.assert_allclose(got, mil_score_bruteforce(fmil, f1, f2), rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
    def test_instance_factor_normalized(self, n, c, seed):
        rng = np.random.default_rng(seed)
        f1, f2 = rng.random((n, c)), rng.random((n, c))
        # with a uniform class factor the score is the instance softmax divided by C
        s = mil_image_score(np.zeros((n, c)), f1, f2).data
        np.testing.assert_allclose(s.sum(axis=0) * c, 1.0, atol=1e-12)


class TestImageLoss:
    def test_values(self):
        eps = LossConfig().clamp_eps
        assert float(image_cls_loss(np.array([[1 - eps]]), np.array([1.0])).data) < 1e-11
        assert float(image_cls_loss(np.array([[0.5], [0.3]]), np.array([1.0])).data) == \
            pytest.approx(-math.log(0.8), abs=1e-14)
        assert float(image_cls_loss(np.array([[eps]]), np.array([0.0])).data) < 1e-11

    def test_sum_clamped_above_one(self):
        out = float(image_cls_loss(np.array([[0.8], [0.9]]), np.array([0.0])).data)
        assert math.isfinite(out)


class TestPseudoLabels:
    def test_threshold_is_strict(self):
        f = np.array([[0.6, 0.5, 0.0], [0.1, 0.2, 0.0]])
        np.testing.assert_array_equal(pseudo_labels(f, f), [1.0, 0.0, 0.0])

    def test_average_of_heads(self):
        f1 = np.array([[0.9, 0.4]])
        f2 = np.array([[0.2, 0.7]])
        np.testing.assert_array_equal(pseudo_labels(f1, f2), [1.0, 1.0])


def _batches(seed, b=2, u=3, n=5, c=3):
    rng = np.random.default_rng(seed)
    lab_heads, unl_heads = RandomHeads(rng, b, n, c), RandomHeads(rng, u, n, c)
    targets = random_targets(rng, b, n, c)
    labels = random_labels(rng, b, c)
    return lab_heads, unl_heads, targets, labels


class TestObjectives:
    def test_empty_unlabeled(self):
        lab, _, t, y = _batches(0)
        batch = LabeledBatch(lab.output(), t, y)
        base = float(detection_loss(batch.output, t).data)
        for fn in (objective_max, objective_min):
            assert float(fn(batch, None, LossConfig(), False).data) == base

    def test_lambda_zero_ignores_unlabeled(self):
        lab, unl, t, y = _batches(1)
        _, other, _, _ = _batches(2)
        batch = LabeledBatch(lab.output(), t, y)
        cfg = LossConfig(lam=0.0)
        a = float(objective_max(batch, unl.output(), cfg, False).data)
        b = float(objective_max(batch, other.output(), cfg, False).data)
        assert a == b

    def test_max_component_sum(self):
        lab, unl, t, y = _batches(3)
        cfg = LossConfig(lam=0.7)
        batch = LabeledBatch(lab.output(), t, y)
        uo = unl.output()
        got = float(objective_max(batch, uo, cfg, True).data)
        score_l = mil_image_score(batch.output.y_fmil, batch.output.y_f1, batch.output.y_f2)
        w = mil_image_score(uo.y_fmil, uo.y_f1, uo.y_f2)
        expected = (float(detection_loss(batch.output, t, cfg).data)
                    + float(image_cls_loss(score_l, y, cfg).data)
                    - 0.7 * float(weighted_discrepancy(uo.y_f1, uo.y_f2, w, cfg)[0].data))
        assert got == pytest.approx(expected, rel=1e-13)

    def test_min_component_sum(self):
        lab, unl, t, y = _batches(4)
        cfg = LossConfig(lam=0.3)
        batch = LabeledBatch(lab.output(), t, y)
        uo = unl.output()
        got = float(objective_min(batch, uo, cfg, True).data)
        score_l = mil_image_score(batch.output.y_fmil, batch.output.y_f1, batch.output.y_f2)
        score_u = mil_image_score(uo.y_fmil, uo.y_f1, uo.y_f2)
        pseudo = pseudo_labels(uo.y_f1, uo.y_f2)
        expected = (float(detection_loss(batch.output, t, cfg).data)
                    + float(image_cls_loss(score_l, y, cfg).data)
                    + 0.3 * float(weighted_discrepancy(uo.y_f1, uo.y_f2, score_u, cfg)[0].data)
                    + float(image_cls_loss(score_u, pseudo, cfg).data))
        assert got == pytest.approx(expected, rel=1e-13)

    def test_max_min_gap(self):
        lab, unl, t, y = _batches(5)
        cfg = LossConfig(lam=0.5)
        batch = LabeledBatch(lab.output(), t, y)
        uo = unl.output()
        gap = float(objective_min(batch, uo, cfg, False).data) - float(objective_max(batch, uo, cfg, False).data)
        dis = float(discrepancy(uo.y_f1, uo.y_f2, cfg)[0].data)
        assert gap == pytest.approx(2 * 0.5 * dis, rel=1e-12)

    def test_all_zero_pseudo_labels_give_negative_bce(self):
        cfg = LossConfig()
        f = Tensor(np.full((1, 4, 2), 0.2))
        fmil = Tensor(np.random.default_rng(0).normal(size=(1, 4, 2)))
        assert not pseudo_labels(f, f).any()
        score = mil_image_score(fmil, f, f)
        sums = np.clip(score.data.sum(axis=1), cfg.clamp_eps, 1 - cfg.clamp_eps)
        expected = -np.log(1 - sums).sum()
        assert float(image_cls_loss(score, pseudo_labels(f, f), cfg).data) == pytest.approx(expected, rel=1e-14)

    def test_unit_weights_without_image_loss_reduce_to_plain(self):
        lab, unl, t, y = _batches(6)
        cfg = LossConfig()
        batch = LabeledBatch(lab.output(), t, y)
        uo = unl.output()
        for fn in (objective_max, objective_min):
            plain = fn(batch, uo, cfg, False).data
            forced = fn(batch, uo, cfg, True, unit_weights=True, image_loss=False).data
            assert plain.tobytes() == forced.tobytes()

    @pytest.mark.parametrize("fn", [objective_max, objective_min])
    @pytest.mark.parametrize("reweight", [False, True])
    def test_gradients(self, fn, reweight):
        lab, unl, t, y = _batches(7, b=2, u=2, n=4, c=2)

        def f():
            return fn(LabeledBatch(lab.output(), t, y), unl.output(), LossConfig(), reweight)

        report = grad_check(f, lab.params + unl.params, tol=1e-4)
        assert report.passed, report.worst


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31))
def test_losses_are_non_negative(n, c, seed):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.uniform(0.001, 0.999, (n, c)), rng.uniform(0.001, 0.999, (n, c))
    t = random_targets(rng, 1, n, c)
    y_img = random_labels(rng, 1, c)[0]
    assert float(focal_loss(p1, t.y_cls[0], t.flags[0]).data) >= 0
    assert float(smooth_l1(rng.normal(size=(n, 4)), t.y_loc[0], t.flags[0]).data) >= 0
    assert float(discrepancy(p1, p2)[0].data) >= 0
    assert float(weighted_discrepancy(p1, p2, rng.random((n, c)))[0].data) >= 0
    score = mil_image_score(rng.normal(size=(n, c)), p1, p2)
    assert float(image_cls_loss(score, y_img).data) >= 0
    assert (float(discrepancy(p1, p2)[0].data) == 0) == bool(np.array_equal(p1, p2))
