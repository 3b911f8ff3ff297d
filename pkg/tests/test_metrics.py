import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy import special, stats

from mmfuse.metrics import (betainc_reg, evaluate, paired_t_test,
                            student_t_sf2)
from mmfuse.tensor import RngState


def brute_force_metrics(preds, targets, n_classes):
    """Independent oracle: count everything explicitly."""
    cm = [[0] * n_classes for _ in range(n_classes)]
    for p, t in zip(preds, targets):
        cm[t][p] += 1
    per_f1 = []
    support = []
    for c in range(n_classes):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(n_classes)) - tp
        fn = sum(cm[c]) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        per_f1.append(2 * p * r / (p + r) if p + r else 0.0)
        support.append(sum(cm[c]))
    total = sum(support)
    weighted = sum(f * s for f, s in zip(per_f1, support)) / total
    acc = sum(cm[c][c] for c in range(n_classes)) / total
    return cm, per_f1, weighted, acc


class TestEvaluate:
    def test_all_correct(self):
        m = evaluate([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert m.weighted_f1 == 1.0
        assert m.accuracy == 1.0

    def test_hand_counted_degenerate_predictor(self):
        # binary, everything predicted class 0, targets half and half
        preds = [0, 0, 0, 0]
        targets = [0, 0, 1, 1]
        m = evaluate(preds, targets, 2)
        assert m.accuracy == 0.5
        assert m.f1[0] == pytest.approx(2 / 3)
        assert m.f1[1] == 0.0
        assert m.weighted_f1 == pytest.approx(1 / 3)

    def test_single_class_targets_perfect(self):
        m = evaluate([1, 1, 1], [1, 1, 1], 3)
        assert m.weighted_f1 == 1.0

    def test_confusion_row_sums_are_support(self):
        rng = RngState(3)
        preds = [rng.randint(4) for _ in range(200)]
        targets = [rng.randint(4) for _ in range(200)]
        m = evaluate(preds, targets, 4)
        npt.assert_array_equal(m.confusion.sum(axis=1), m.support)

    def test_matches_brute_force_oracle(self):
        rng = RngState(5)
        for trial in range(100):
            n_classes = 2 + rng.randint(5)
            n = 1 + rng.randint(60)
            preds = [rng.randint(n_classes) for _ in range(n)]
            targets = [rng.randint(n_classes) for _ in range(n)]
            m = evaluate(preds, targets, n_classes)
            cm, per_f1, weighted, acc = brute_force_metrics(preds, targets,
                                                            n_classes)
            npt.assert_array_equal(m.confusion, cm)
            npt.assert_allclose(m.f1, per_f1, atol=1e-12)
            assert m.weighted_f1 == pytest.approx(weighted, abs=1e-12)
            assert m.accuracy == pytest.approx(acc, abs=1e-12)

    def test_empty_input(self):
        with pytest.raises(ValueError):
            evaluate([], [], 2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate([0], [0, 1], 2)


class TestIncompleteBeta:
    def test_matches_scipy(self):
        rng = RngState(7)
        for _ in range(200):
            a = 0.5 + 10.0 * float(rng.uniforms(1)[0])
            b = 0.5 + 10.0 * float(rng.uniforms(1)[0])
            x = float(rng.uniforms(1)[0])
            assert betainc_reg(a, b, x) == pytest.approx(
                float(special.betainc(a, b, x)), abs=1e-12)

    def test_endpoints(self):
        assert betainc_reg(2.0, 3.0, 0.0) == 0.0
        assert betainc_reg(2.0, 3.0, 1.0) == 1.0

    def test_t_tail_matches_scipy(self):
        for t in (0.1, 1.0, 2.5, 10.0):
            for df in (1, 2, 5, 30):
                ref = 2.0 * float(stats.t.sf(t, df))
                assert student_t_sf2(t, df) == pytest.approx(ref, abs=1e-8)


class TestPairedTTest:
    def test_identical_samples(self):
        t, p = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert t == 0.0
        assert p == 1.0

    def test_reference_value(self):
        t, p = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        assert t == pytest.approx(2.0 * math.sqrt(3.0), rel=1e-9)
        assert p == pytest.approx(0.0742, abs=1e-4)

    def test_constant_nonzero_difference(self):
        t, p = paired_t_test([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])
        assert t == math.inf
        assert p == 0.0

    def test_negative_degenerate_direction(self):
        t, p = paired_t_test([0.0, 0.0], [2.0, 2.0])
        assert t == -math.inf
        assert p == 0.0

    def test_matches_scipy_across_sizes(self):
        rng = RngState(11)
        for n in range(2, 51):
            a = rng.gaussians(n)
            b = rng.gaussians(n) * 0.5 + 0.1
            t, p = paired_t_test(a, b)
            ref = stats.ttest_rel(a, b)
            assert t == pytest.approx(float(ref.statistic), rel=1e-10)
            assert p == pytest.approx(float(ref.pvalue), abs=1e-6)

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [2.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])
