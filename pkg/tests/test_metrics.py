"""Metric tests: confusion counts, IoU/PA/precision/recall, reports."""

import numpy as np
import pytest

from sstu.datasets import Sample
from sstu.metrics import (ConfusionCounts, EvalReport, binarize, confusion,
                          evaluate_masks, evaluate_set, iou, pa, precision,
                          recall, stereo_consistency)


def brute_force_metrics(pred, gt):
    """Independent oracle: explicit per-pixel enumeration."""
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    m_iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    m_pa = (tp + tn) / (tp + fp + fn + tn)
    m_pr = tp / (tp + fp) if tp + fp else 1.0
    m_re = tp / (tp + fn) if tp + fn else 1.0
    return (tp, fp, fn, tn), (m_iou, m_pa, m_pr, m_re)


class TestBinarize:
    def test_boundary_is_positive(self):
        assert binarize(np.array([[0.5]]))[0, 0] == 1

    def test_below_boundary(self):
        assert binarize(np.array([[0.499]]))[0, 0] == 0

    def test_all_ones(self):
        np.testing.assert_array_equal(binarize(np.ones((3, 3))), np.ones((3, 3)))

    def test_monotone_in_threshold(self):
        p = np.random.default_rng(0).uniform(size=(16, 16))
        prev = binarize(p, 0.0).sum()
        for t in np.linspace(0.1, 1.0, 10):
            cur = binarize(p, t).sum()
            assert cur <= prev
            prev = cur


class TestConfusion:
    def test_equal_masks(self):
        m = (np.random.default_rng(1).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        c = confusion(m, m)
        assert c.fp == 0 and c.fn == 0
        assert c.tp == int(m.sum())

    def test_inverted_masks(self):
        m = (np.random.default_rng(2).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        c = confusion(1 - m, m)
        assert c.tp == 0 and c.tn == 0

    def test_4x4_enumerated_case(self):
        pred = np.zeros((4, 4), np.uint8)
        gt = np.zeros((4, 4), np.uint8)
        pred[0, 0] = pred[0, 1] = pred[1, 0] = pred[1, 1] = 1   # 4 positives
        gt[1, 1] = gt[1, 0] = gt[2, 2] = gt[2, 3] = 1           # 4 positives, 2 overlap
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (2, 2, 2, 10)
        assert iou(c) == pytest.approx(2 / 6)
        assert pa(c) == pytest.approx(12 / 16)
        assert precision(c) == pytest.approx(0.5)
        assert recall(c) == pytest.approx(0.5)

    def test_total_invariant(self):
        pred = (np.random.default_rng(3).uniform(size=(5, 7)) > 0.3).astype(np.uint8)
        gt = (np.random.default_rng(4).uniform(size=(5, 7)) > 0.7).astype(np.uint8)
        assert confusion(pred, gt).total == 35

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))


class TestMetricFormulas:
    def test_perfect_prediction_all_ones(self):
        m = np.ones((4, 4), np.uint8)
        c = confusion(m, m)
        assert iou(c) == pa(c) == precision(c) == recall(c) == 1.0

    def test_vacuous_conventions(self):
        c = ConfusionCounts(0, 0, 0, 16)
        assert iou(c) == 1.0 and precision(c) == 1.0 and recall(c) == 1.0
        assert pa(c) == 1.0

    def test_brute_force_equivalence_1000_masks(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            pred = (rng.uniform(size=(8, 8)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
            gt = (rng.uniform(size=(8, 8)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
            counts, (m_iou, m_pa, m_pr, m_re) = brute_force_metrics(pred, gt)
            c = confusion(pred, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == counts
            assert iou(c) == m_iou
            assert pa(c) == m_pa
            assert precision(c) == m_pr
            assert recall(c) == m_re
            if c.tp > 0:
                assert iou(c) <= min(precision(c), recall(c))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        pred = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        gt = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        perm = rng.permutation(64)
        c1 = confusion(pred, gt)
        c2 = confusion(pred.ravel()[perm].reshape(8, 8),
                       gt.ravel()[perm].reshape(8, 8))
        assert c1 == c2

    def test_pa_iou_divergence_small_object(self):
        # a missed small object in a large frame: PA stays high, IoU collapses
        gt = np.zeros((64, 64), np.uint8)
        gt[30:34, 30:34] = 1              # 16 px object
        pred = np.zeros((64, 64), np.uint8)
        pred[30:32, 30:31] = 1            # 2 px clipped detection
        c = confusion(pred, gt)
        assert iou(c) < 0.2
        assert pa(c) > 0.95


class TestStereoConsistency:
    def test_identical(self):
        m = (np.random.default_rng(6).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        assert stereo_consistency(m, m) == 1.0

    def test_disjoint(self):
        left = np.zeros((4, 4), np.uint8)
        right = np.zeros((4, 4), np.uint8)
        left[0, 0] = 1
        right[3, 3] = 1
        assert stereo_consistency(left, right) == 0.0

    def test_shifted_blob_overlap(self):
        # 10 px wide blob shifted right by 2: intersection 8, union 12
        left = np.zeros((4, 16), np.uint8)
        right = np.zeros((4, 16), np.uint8)
        left[1, 2:12] = 1
        right[1, 4:14] = 1
        assert stereo_consistency(left, right) == pytest.approx(8 / 12)


class TestEvaluate:
    def test_single_image_means(self):
        pred = np.zeros((4, 4), np.uint8)
        gt = np.zeros((4, 4), np.uint8)
        pred[0, :2] = 1
        gt[0, 1:3] = 1
        report = evaluate_masks([("img0", pred, gt)])
        m = report.per_image[0]
        assert report.miou == m.iou and report.mpa == m.pa
        assert report.mprecision == m.precision and report.mrecall == m.recall

    def test_two_image_mean(self):
        gt1 = np.zeros((10, 10), np.uint8)
        gt1[0, :5] = 1
        pred1 = np.zeros((10, 10), np.uint8)
        pred1[0, :1] = 1                   # iou 1/5
        gt2 = np.zeros((10, 10), np.uint8)
        gt2[0, :5] = 1
        pred2 = np.zeros((10, 10), np.uint8)
        pred2[0, :4] = 1                   # iou 4/5
        report = evaluate_masks([("a", pred1, gt1), ("b", pred2, gt2)])
        assert report.miou == pytest.approx(0.5)

    def test_cross_metric_recomputation_audit(self):
        rng = np.random.default_rng(7)
        pairs = []
        for i in range(10):
            pred = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
            gt = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
            pairs.append((str(i), pred, gt))
        report = evaluate_masks(pairs)
        for (pid, pred, gt), m in zip(pairs, report.per_image):
            _, (m_iou, m_pa, m_pr, m_re) = brute_force_metrics(pred, gt)
            assert m.id == pid
            assert m.iou == m_iou and m.pa == m_pa
            assert m.precision == m_pr and m.recall == m_re
        assert report.miou == pytest.approx(np.mean([m.iou for m in report.per_image]))

    def test_evaluate_set_with_predictor(self):
        rng = np.random.default_rng(8)
        samples = []
        for _ in range(3):
            mask = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
            img = np.broadcast_to(mask, (3, 8, 8)).astype(np.float32).copy()
            samples.append(Sample(img, mask))
        report = evaluate_set(lambda im: im[0], samples, threshold=0.5)
        assert report.miou == 1.0 and report.mpa == 1.0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate_set(lambda im: im[0], [])
        with pytest.raises(ValueError, match="empty"):
            evaluate_masks([])

    def test_aggregate_counts(self):
        pred = np.ones((4, 4), np.uint8)
        gt = np.ones((4, 4), np.uint8)
        report = evaluate_masks([("a", pred, gt), ("b", pred, gt)])
        assert report.aggregate.tp == 32
        assert report.aggregate_miou == 1.0

    def test_csv_format(self):
        pred = np.ones((4, 4), np.uint8)
        report = evaluate_masks([("x", pred, pred)])
        lines = report.to_csv().splitlines()
        assert lines[0] == "id,iou,pa,precision,recall"
        assert lines[1] == "x,1.0000,1.0000,1.0000,1.0000"
        assert lines[2] == "MEAN,1.0000,1.0000,1.0000,1.0000"
