import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import t as student

from hypernymy.metrics import SynsetMetrics, aggregate
from hypernymy.stats import (LabeledPredictionSet, RatingMatrix, StatsError, calibration_curve,
                             coincidence_matrix, ece, krippendorff_alpha, load_labeled, load_ratings,
                             pairwise_correlations, pairwise_seed_correlation, spearman,
                             stability_summary, top1_accuracy)

import oracles


def calibrated(n, k=10, seed=0):
    return LabeledPredictionSet(*oracles.calibrated_classifier(n, k, seed))


class TestCalibration:
    def test_perfectly_calibrated(self):
        assert ece(calibrated(100_000), 100) < 0.02

    def test_confident_and_right(self):
        data = LabeledPredictionSet(np.eye(4), np.arange(4))
        assert ece(data) == 0.0
        assert top1_accuracy(data) == 1.0

    def test_confident_and_wrong(self):
        data = LabeledPredictionSet(np.eye(4), (np.arange(4) + 1) % 4)
        assert ece(data) == 1.0
        assert top1_accuracy(data) == 0.0

    def test_random_guessing_accuracy(self):
        rng = np.random.default_rng(2)
        probs = rng.dirichlet(np.ones(10), size=100_000)
        acc = top1_accuracy(LabeledPredictionSet(probs, rng.integers(10, size=100_000)))
        assert acc == pytest.approx(0.1, abs=0.01)

    def test_ties_go_to_lowest_index(self):
        data = LabeledPredictionSet([[0.5, 0.5]], [0])
        assert top1_accuracy(data) == 1.0

    def test_right_inclusive_bins(self):
        # 0.5 belongs to bin (0.4, 0.5] with 10 bins, i.e. index 4
        data = LabeledPredictionSet([[0.5, 0.5], [0.51, 0.49]], [0, 1])
        bins = [row["bin"] for row in calibration_curve(data, 10)]
        assert bins == [4, 5]

    def test_curve_weights_match_ece(self):
        data = calibrated(5000, seed=3)
        curve = calibration_curve(data, 20)
        n = sum(r["count"] for r in curve)
        manual = sum(r["count"] / n * abs(r["accuracy"] - r["confidence"]) for r in curve)
        assert ece(data, 20) == pytest.approx(manual, abs=1e-12)

    def test_row_permutation_invariance(self):
        data = calibrated(3000, seed=4)
        perm = np.random.default_rng(0).permutation(3000)
        shuffled = LabeledPredictionSet(data.probs[perm], data.labels[perm])
        assert ece(data, 50) == pytest.approx(ece(shuffled, 50), abs=1e-15)

    def test_errors(self):
        with pytest.raises(StatsError):
            ece(LabeledPredictionSet(np.zeros((0, 3)), []))
        with pytest.raises(StatsError):
            ece(calibrated(10), 0)
        with pytest.raises(StatsError):
            LabeledPredictionSet([[0.5, 0.5]], [2])

    def test_load_labeled(self, tmp_path):
        p = tmp_path / "l.jsonl"
        p.write_text('{"label": 1, "probs": [0.2, 0.8]}\n{"label": 0, "logits": [0, 0]}\n')
        data = load_labeled(p)
        assert data.labels.tolist() == [1, 0]
        np.testing.assert_allclose(data.probs[1], [0.5, 0.5])


class TestSpearman:
    def test_perfect(self):
        assert spearman([1, 2, 3], [1, 2, 3], method="t") == (1.0, 0.0)
        assert spearman([1, 2, 3], [3, 2, 1], method="t") == (-1.0, 0.0)

    def test_perfect_exact(self):
        rho, p = spearman([1, 2, 3], [1, 2, 3])
        assert rho == 1.0 and p == pytest.approx(1 / 3)

    def test_exhaustive_against_permutation_oracle(self):
        rng = random.Random(5)
        for n in range(3, 9):
            for _ in range(4):
                x = [rng.randint(0, 4) for _ in range(n)]
                y = [rng.randint(0, 4) for _ in range(n)]
                if len(set(x)) == 1 or len(set(y)) == 1:
                    continue
                rho_o, p_o = oracles.permutation_p(x, y)
                rho, p = spearman(x, y)
                assert rho == pytest.approx(rho_o, abs=1e-12)
                assert abs(p - p_o) <= 0.01

    def test_large_n_t_approximation(self):
        rng = np.random.default_rng(6)
        x, y = rng.normal(size=200), rng.normal(size=200)
        rho, p = spearman(x, y)
        assert rho == pytest.approx(oracles.spearman_rho(list(x), list(y)), abs=1e-12)
        assert abs(rho) < 0.14
        t = rho * math.sqrt(198 / (1 - rho**2))
        assert p == pytest.approx(2 * student.sf(abs(t), 198), rel=1e-12)

    def test_null_p_values_roughly_uniform(self):
        rng = np.random.default_rng(7)
        ps = [spearman(rng.normal(size=50), rng.normal(size=50))[1] for _ in range(400)]
        assert np.mean(np.array(ps) < 0.05) == pytest.approx(0.05, abs=0.035)
        assert np.mean(ps) == pytest.approx(0.5, abs=0.06)

    def test_ties_use_average_ranks(self):
        x, y = [1, 2, 2, 3, 4], [10, 20, 20, 40, 30]
        assert spearman(x, y)[0] == pytest.approx(oracles.spearman_rho(x, y), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=10, max_size=40, unique=True), st.data())
    def test_monotone_transform_invariance(self, xs, data):
        ys = data.draw(st.permutations(xs))
        rho = spearman(xs, ys)[0]
        assert spearman(np.exp(np.array(xs) / 1e3), np.array(ys, dtype=float) ** 3)[0] == pytest.approx(rho, abs=1e-12)

    def test_errors(self):
        with pytest.raises(StatsError, match="constant"):
            spearman([1, 1, 1], [1, 2, 3])
        with pytest.raises(StatsError):
            spearman([1, 2], [1, 2])
        with pytest.raises(StatsError):
            spearman([1, 2, 3], [1, 2])
        with pytest.raises(StatsError):
            spearman([1, 2, 3], [1, 2, 3], method="bogus")


class TestKrippendorff:
    # reliability data with 4 coders, 12 units and missing values
    TEXTBOOK = [
        [1, 2, 3, 3, 2, 1, 4, 1, 2, None, None, None],
        [1, 2, 3, 3, 2, 2, 4, 1, 2, 5, None, 3],
        [None, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, None],
        [1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, None],
    ]

    def test_textbook_example(self):
        alpha = krippendorff_alpha(RatingMatrix.from_rows(self.TEXTBOOK))
        assert alpha == pytest.approx(0.743, abs=5e-4)
        units = list(zip(*self.TEXTBOOK))
        assert alpha == pytest.approx(float(oracles.alpha_by_hand(units)), abs=1e-9)

    def test_four_item_hand_computation(self):
        # o_aa = 2, o_ab = o_ba = 1, o_bb = 4; n_a = 3, n_b = 5, n = 8
        # alpha = 1 - 7 * 2 / (2 * 3 * 5) = 8/15
        rows = [["a", "a", "b", "b"], ["a", "b", "b", "b"]]
        values, o = coincidence_matrix(RatingMatrix.from_rows(rows))
        assert values == ["a", "b"]
        assert o.tolist() == [[2.0, 1.0], [1.0, 4.0]]
        assert krippendorff_alpha(RatingMatrix.from_rows(rows)) == pytest.approx(8 / 15, abs=1e-12)

    def test_unanimous(self):
        rows = [["x", "y", "z", "x"]] * 3
        assert krippendorff_alpha(RatingMatrix.from_rows(rows)) == 1.0

    def test_chance_level(self):
        rng = np.random.default_rng(8)
        rows = rng.integers(2, size=(3, 20_000)).tolist()
        assert krippendorff_alpha(RatingMatrix.from_rows(rows)) == pytest.approx(0.0, abs=0.02)

    def test_random_against_fraction_oracle(self):
        rng = random.Random(9)
        for _ in range(30):
            raters, items = rng.randint(2, 5), rng.randint(2, 12)
            rows = [[rng.choice(["a", "b", "c", None]) for _ in range(items)] for _ in range(raters)]
            units = list(zip(*rows))
            if sum(1 for u in units if sum(v is not None for v in u) >= 2) == 0:
                continue
            ratings = RatingMatrix.from_rows(rows)
            values, o = coincidence_matrix(ratings)
            n_c = o.sum(axis=1)
            if n_c.sum() ** 2 == np.dot(n_c, n_c):
                assert krippendorff_alpha(ratings) == 1.0
                continue
            assert krippendorff_alpha(ratings) == pytest.approx(float(oracles.alpha_by_hand(units)), abs=1e-9)

    def test_errors(self):
        with pytest.raises(StatsError, match="two raters"):
            krippendorff_alpha(RatingMatrix.from_rows([["a", "b"]]))
        with pytest.raises(StatsError, match="pairable"):
            krippendorff_alpha(RatingMatrix.from_rows([["a", None], [None, "b"]]))
        with pytest.raises(StatsError, match="nominal"):
            krippendorff_alpha(RatingMatrix.from_rows([["a"], ["a"]]), level="interval")

    def test_csv(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("item,rater,category\n1,ann,left\n1,bob,left\n2,ann,right\n2,bob,equal\n3,ann,\n")
        ratings = load_ratings(p)
        assert ratings.raters == {"ann", "bob"}
        assert ratings.ratings["2"] == {"ann": "right", "bob": "equal"}
        assert "3" not in ratings.ratings

    def test_csv_missing_column(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("item,rater\n1,ann\n")
        with pytest.raises(StatsError, match="category"):
            load_ratings(p)


def report(values, model="m"):
    ms = [SynsetMetrics(f"n{i:08d}", v, v / 2, 4, 3) for i, v in enumerate(values, 1)]
    return aggregate(ms, model_id=model)


class TestSeedStability:
    def test_identical_reports(self):
        r = report(np.linspace(0.1, 0.9, 20))
        assert pairwise_seed_correlation([r, r, r], "isp") == pytest.approx(1.0)

    def test_shuffled_reports_near_zero(self):
        rng = np.random.default_rng(10)
        base = np.linspace(0, 1, 300)
        reports = [report(rng.permutation(base), f"m{i}") for i in range(4)]
        assert abs(pairwise_seed_correlation(reports, "isp")) < 0.1

    def test_pairs_listed(self):
        rs = [report([0.1, 0.2, 0.3, 0.4], f"m{i}") for i in range(3)]
        pairs = pairwise_correlations(rs, "scs")
        assert [(p["a"], p["b"]) for p in pairs] == [(0, 1), (0, 2), (1, 2)]

    def test_mismatch(self):
        a = report([0.1, 0.2, 0.3])
        b = report([0.1, 0.2, 0.3, 0.4])
        with pytest.raises(StatsError, match="different synsets"):
            pairwise_seed_correlation([a, b], "isp")

    def test_stability_summary(self):
        s = stability_summary([report([0.2, 0.4]), report([0.4, 0.6])])
        assert s["aggregate_isp"]["mean"] == pytest.approx(0.4)
        assert s["aggregate_isp"]["std"] == pytest.approx(math.sqrt(0.02))
