import numpy as np
import pytest

from msam.metrics import (
    EvalBatch,
    auc_scores,
    calibration_table,
    f1_scores,
    mece,
    per_class_report,
    precision_at_n,
    quant_errors,
)


def batch(probs, gold):
    return EvalBatch(np.asarray(probs, dtype=float), np.asarray(gold))


class TestEvalBatch:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            batch(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            batch(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_probability_range(self):
        with pytest.raises(ValueError):
            batch([[1.5]], [[1]])

    def test_nonbinary_gold(self):
        with pytest.raises(ValueError):
            batch([[0.5]], [[2]])


class TestF1:
    def test_perfect_predictions(self):
        b = batch([[0.9, 0.1], [0.2, 0.8]], [[1, 0], [0, 1]])
        assert f1_scores(b) == (1.0, 1.0)

    def test_all_negative_predictions(self):
        b = batch([[0.1, 0.1], [0.2, 0.3]], [[1, 0], [0, 1]])
        assert f1_scores(b) == (0.0, 0.0)

    def test_hand_counted_confusion(self):
        # preds {(1,0),(1,1)} vs gold {(1,0),(0,1)}: TP=2 FP=1 FN=0
        b = batch([[0.9, 0.1], [0.8, 0.7]], [[1, 0], [0, 1]])
        macro, micro = f1_scores(b)
        assert micro == pytest.approx(0.8)
        # class 0: tp=1 fp=1 fn=0 -> 2/3; class 1: tp=1 fp=0 fn=0 -> 1
        assert macro == pytest.approx((2 / 3 + 1.0) / 2)

    def test_micro_invariant_under_class_permutation(self):
        rng = np.random.default_rng(0)
        p = rng.random((12, 5))
        g = (rng.random((12, 5)) > 0.6).astype(int)
        perm = rng.permutation(5)
        _, micro = f1_scores(batch(p, g))
        _, micro_p = f1_scores(batch(p[:, perm], g[:, perm]))
        assert micro == pytest.approx(micro_p)

    def test_macro_invariant_under_document_permutation(self):
        rng = np.random.default_rng(1)
        p = rng.random((12, 5))
        g = (rng.random((12, 5)) > 0.6).astype(int)
        perm = rng.permutation(12)
        macro, _ = f1_scores(batch(p, g))
        macro_p, _ = f1_scores(batch(p[perm], g[perm]))
        assert macro == pytest.approx(macro_p)


class TestPrecisionAtN:
    def test_gold_equals_top_n(self):
        b = batch([[0.9, 0.8, 0.1, 0.2]], [[1, 1, 0, 0]])
        assert precision_at_n(b, 2) == 1.0

    def test_no_gold_contributes_zero(self):
        b = batch([[0.9, 0.8], [0.7, 0.6]], [[0, 0], [1, 1]])
        assert precision_at_n(b, 2) == pytest.approx(0.5)

    def test_ties_break_by_class_index(self):
        b = batch([[0.5, 0.5, 0.5]], [[0, 1, 1]])
        # top-1 under index tie-break is class 0, which is not gold
        assert precision_at_n(b, 1) == 0.0

    def test_cutoff_beyond_classes_is_an_error(self):
        b = batch([[0.5, 0.5]], [[0, 1]])
        with pytest.raises(ValueError):
            precision_at_n(b, 3)


def brute_force_auc(scores, labels):
    """Quadratic pair-counting oracle with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        b = batch([[0.9], [0.8], [0.2], [0.1]], [[1], [1], [0], [0]])
        assert auc_scores(b) == (1.0, 1.0)

    def test_all_identical_scores(self):
        b = batch([[0.5], [0.5], [0.5]], [[1], [0], [1]])
        macro, micro = auc_scores(b)
        assert macro == pytest.approx(0.5)
        assert micro == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_quadratic_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = np.round(rng.random((20, 3)), 1)  # rounding forces ties
        g = (rng.random((20, 3)) > 0.5).astype(int)
        g[0] = [1, 1, 1]
        g[1] = [0, 0, 0]
        b = batch(p, g)
        macro, micro = auc_scores(b)
        per_class = [brute_force_auc(p[:, l], g[:, l]) for l in range(3)]
        assert macro == pytest.approx(np.mean(per_class), abs=1e-12)
        assert micro == pytest.approx(
            brute_force_auc(p.reshape(-1), g.reshape(-1)), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        p = rng.random((15, 2))
        g = (rng.random((15, 2)) > 0.5).astype(int)
        g[0] = [1, 1]
        g[1] = [0, 0]
        a1 = auc_scores(batch(p, g))
        a2 = auc_scores(batch(p ** 3, g))
        assert a1 == pytest.approx(a2)

    def test_degenerate_everything_is_an_error(self):
        with pytest.raises(ValueError):
            auc_scores(batch([[0.3], [0.4]], [[1], [1]]))

    def test_macro_skips_degenerate_classes(self):
        b = batch([[0.9, 0.4], [0.1, 0.6]], [[1, 1], [0, 1]])
        macro, _ = auc_scores(b)
        assert macro == 1.0  # class 1 has no negative, skipped


class TestMece:
    def test_bin_counts_sum_to_n(self):
        rng = np.random.default_rng(0)
        b = batch(rng.random((50, 3)), (rng.random((50, 3)) > 0.5).astype(int))
        table = calibration_table(b, 20)
        np.testing.assert_array_equal(table.counts.sum(axis=1), 50)

    def test_perfectly_calibrated_bins_give_zero(self):
        # predictor emits the exact empirical positive rate of its bin
        probs = np.array([[0.225]] * 4)
        gold = np.array([[1], [0], [0], [0]])
        # bin [0.2, 0.25) holds all four: mean conf 0.225, pos frac 0.25
        b = batch(np.full((4, 1), 0.25), gold)
        value, _ = mece(b, 4)
        assert value == pytest.approx(0.0)

    def test_constant_one_on_all_negative_class(self):
        b = batch(np.ones((10, 1)), np.zeros((10, 1), dtype=int))
        value, per_class = mece(b, 20)
        assert value == pytest.approx(1.0)
        assert per_class[0] == pytest.approx(1.0)

    def test_bernoulli_consistent_predictor_is_calibrated(self):
        rng = np.random.default_rng(5)
        n = 20000
        p = rng.random((n, 2))
        gold = (rng.random((n, 2)) < p).astype(int)
        value, _ = mece(batch(p, gold), 20)
        assert value < 0.02

    def test_true_parameters_calibrate_better_than_distorted(self):
        rng = np.random.default_rng(6)
        n = 20000
        p = rng.random((n, 1))
        gold = (rng.random((n, 1)) < p).astype(int)
        honest, _ = mece(batch(p, gold), 20)
        distorted, _ = mece(batch(np.clip(p * 0.5 + 0.4, 0, 1), gold), 20)
        assert honest < distorted


class TestQuantErrors:
    def test_exact_estimates(self):
        est = [np.array([0.2, 0.3])]
        assert quant_errors(est, est, [10]) == (0.0, 0.0)

    def test_smoothing_arithmetic(self):
        mae, mrae = quant_errors([np.array([0.5])], [np.array([0.0])], [1])
        assert mae == pytest.approx(0.5)
        assert mrae == pytest.approx(1.0)  # 0.5 / (0 + 1/2)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(7)
        estimates, truths, sizes = [], [], []
        for _ in range(30):
            L = 6
            estimates.append(rng.random(L))
            truths.append(rng.random(L))
            sizes.append(int(rng.integers(1, 50)))
        mae, mrae = quant_errors(estimates, truths, sizes)
        ref_mae = np.mean([np.abs(e - t).mean()
                           for e, t in zip(estimates, truths)])
        ref_mrae = np.mean([
            (np.abs(e - t) / (t + 1.0 / (2 * s))).mean()
            for e, t, s in zip(estimates, truths, sizes)])
        assert mae == pytest.approx(ref_mae, abs=1e-9)
        assert mrae == pytest.approx(ref_mrae, abs=1e-9)

    def test_zero_size_is_an_error(self):
        with pytest.raises(ValueError):
            quant_errors([np.array([0.1])], [np.array([0.1])], [0])


class TestPerClassReport:
    def test_rows_and_ranges(self):
        rng = np.random.default_rng(8)
        p = rng.random((30, 4))
        g = (rng.random((30, 4)) > 0.5).astype(int)
        rows = per_class_report(batch(p, g))
        assert len(rows) == 4
        for row in rows:
            assert 0.0 <= row["f1"] <= 1.0
            assert 0.0 <= row["ece"] <= 1.0
            assert 0.0 <= row["prevalence"] <= 1.0
