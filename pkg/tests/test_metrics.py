import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypernymy.ingest import PredictionSet, softmax
from hypernymy.metrics import (PAPER_SCS_NORMALIZER, MetricError, MetricReport, SynsetMetrics, aggregate,
                               evaluate, evaluate_synsets, isp, load_report, mean_kl_to_mixture,
                               resolve_normalizer, scs, scs_normalizer)

import oracles

ROWS = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]])


def toy_predictions(graph, n=4, seed=0, kind="logits"):
    rng = np.random.default_rng(seed)
    rows = {s: rng.normal(size=(n, len(graph.leaves))) for s in graph.evaluation_set()}
    if kind == "probabilities":
        rows = {s: softmax(r) for s, r in rows.items()}
    return PredictionSet(kind, rows, model_id="toy", seed=seed)


class TestIsp:
    def test_hand_example(self):
        assert isp(ROWS, [0, 1]) == pytest.approx(0.8, abs=1e-15)

    def test_single_term(self):
        assert isp(ROWS[1:], [2]) == pytest.approx(0.3, abs=1e-15)

    def test_uses_full_distribution_for_logits(self):
        logits = np.log(ROWS)
        assert isp(logits, [0, 1], "logits") == pytest.approx(0.8, abs=1e-12)

    def test_root_is_one(self):
        rows = softmax(np.random.default_rng(1).normal(size=(8, 50)))
        assert isp(rows, range(50)) == pytest.approx(1.0, abs=1e-12)

    def test_empty_inputs(self):
        with pytest.raises(MetricError):
            isp(np.zeros((0, 3)), [0])
        with pytest.raises(MetricError):
            isp(ROWS, [])


class TestScs:
    def test_hand_example(self):
        # conditional rows (7/9, 2/9) and (1/7, 6/7); mixture (29/63, 34/63)
        mix = (29 / 63, 34 / 63)
        kl1 = 7 / 9 * math.log(7 / 9 / mix[0]) + 2 / 9 * math.log(2 / 9 / mix[1])
        kl2 = 1 / 7 * math.log(1 / 7 / mix[0]) + 6 / 7 * math.log(6 / 7 / mix[1])
        assert kl1 == pytest.approx(0.2107, abs=1e-4)
        assert kl2 == pytest.approx(0.2293, abs=1e-4)
        assert scs(ROWS, [0, 1]) == pytest.approx((kl1 + kl2) / 2, abs=1e-15)
        assert scs(ROWS, [0, 1]) == pytest.approx(0.2200, abs=1e-4)

    def test_singleton_excluded(self):
        assert scs(ROWS, [2]) is None
        # had it been included, a one-point distribution never diverges from its mean
        assert mean_kl_to_mixture(np.ones((2, 1))) == 0.0

    def test_identical_rows_exactly_zero(self):
        row = softmax(np.random.default_rng(3).normal(size=17))
        assert scs(np.tile(row, (9, 1)), range(0, 17, 2)) == 0.0

    def test_one_hot_distinct_leaves_reaches_log_k(self):
        eye = np.eye(5)
        assert scs(eye, range(5)) == pytest.approx(math.log(5), abs=1e-15)

    def test_logit_shift_invariance(self):
        logits = np.random.default_rng(4).normal(size=(6, 10))
        a = scs(logits, [1, 3, 5, 7], "logits")
        b = scs(logits + 123.0, [1, 3, 5, 7], "logits")
        assert a == pytest.approx(b, abs=1e-12)

    def test_sample_permutation_invariance(self):
        rows = softmax(np.random.default_rng(5).normal(size=(7, 12)))
        perm = rows[[6, 2, 0, 1, 5, 3, 4]]
        # fsum makes the result independent of order to the last bit
        assert scs(rows, range(6)) == scs(perm, range(6))
        assert isp(rows, range(6)) == isp(perm, range(6))


class TestAgainstOracle:
    def test_random_small_cases(self):
        rng = random.Random(11)
        for _ in range(300):
            k = rng.randint(2, 10)
            n = rng.randint(1, 8)
            rows = [[rng.random() ** 3 for _ in range(k)] for _ in range(n)]
            rows = [[v / sum(r) for v in r] for r in rows]
            sub = sorted(rng.sample(range(k), rng.randint(1, k)))
            arr = np.array(rows)
            assert isp(arr, sub) == pytest.approx(oracles.isp(rows, sub), abs=1e-12)
            expected = oracles.scs(rows, sub)
            got = scs(arr, sub)
            if expected is None:
                assert got is None
            else:
                assert got == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(2, 12), st.data())
    def test_bounds(self, n, k, data):
        seed = data.draw(st.integers(0, 2**32 - 1))
        rows = softmax(np.random.default_rng(seed).normal(scale=3, size=(n, k)))
        sub = sorted(data.draw(st.sets(st.integers(0, k - 1), min_size=1)))
        value = isp(rows, sub)
        assert 0.0 <= value <= 1.0
        s = scs(rows, sub)
        if len(sub) > 1:
            assert 0.0 <= s <= math.log(min(n, len(sub))) + 1e-9


class TestAggregate:
    def m(self, synset, isp_value, scs_value, size=2):
        return SynsetMetrics(synset, isp_value, scs_value, 4, size)

    def test_isp_mean(self):
        r = aggregate([self.m("n00000001", 0.4, None, 1), self.m("n00000002", 0.6, 0.1)])
        assert r.aggregate_isp == pytest.approx(0.5)

    def test_scs_exclusion(self):
        r = aggregate([self.m("n00000001", 1, 0.2), self.m("n00000002", 1, None, 1),
                       self.m("n00000003", 1, 0.4)])
        assert r.aggregate_scs == pytest.approx(0.3)
        assert (r.n_scs_included, r.n_scs_excluded) == (2, 1)

    def test_normalizer_division(self):
        r = aggregate([self.m("n00000001", 0.5, 0.8)], scs_norm=2.0)
        assert r.aggregate_scs == pytest.approx(0.4)
        assert r.mean_scs == pytest.approx(0.8)

    def test_missing_expected(self):
        with pytest.raises(MetricError, match="n00000009"):
            aggregate([self.m("n00000001", 1, 0.1)], expected=["n00000001", "n00000009"])

    def test_order_independent(self):
        ms = [self.m(f"n{i:08d}", i / 10, i / 7) for i in range(1, 9)]
        a = aggregate(ms).to_json()
        b = aggregate(list(reversed(ms))).to_json()
        assert a == b


class TestNormalizer:
    def test_single_eligible_synset(self):
        from hypernymy.hierarchy import build_hierarchy
        g = build_hierarchy([("n00000011", "n00000001"), ("n00000012", "n00000001")],
                            ["n00000011", "n00000012"], {})
        assert scs_normalizer(g, 32) == pytest.approx(math.log(2), abs=1e-15)
        assert scs_normalizer(g, 32, cap_by_samples=True) == pytest.approx(math.log(2), abs=1e-15)

    def test_one_sample_caps_to_zero(self, toy_graph):
        assert scs_normalizer(toy_graph, 1, cap_by_samples=True) == 0.0

    def test_toy_closed_form(self, toy_graph):
        # eligible subtrees: entity 6, animal 4, lizard 2, dog 2, vehicle 2
        expected = (math.log(6) + math.log(4) + 3 * math.log(2)) / 5
        assert scs_normalizer(toy_graph) == pytest.approx(expected, abs=1e-15)
        capped = (2 * math.log(3) + 3 * math.log(2)) / 5
        assert scs_normalizer(toy_graph, 3, cap_by_samples=True) == pytest.approx(capped, abs=1e-15)

    def test_modes(self, toy_graph):
        assert resolve_normalizer(toy_graph, "paper") == (PAPER_SCS_NORMALIZER, "paper")
        assert resolve_normalizer(toy_graph, "none") == (1.0, "none")
        assert resolve_normalizer(toy_graph, 2.5) == (2.5, "fixed")
        with pytest.raises(ValueError):
            resolve_normalizer(toy_graph, "bogus")

    def test_real_hierarchy(self, real_graph):
        assert scs_normalizer(real_graph, 32) == pytest.approx(1.6236960, abs=1e-6)
        assert scs_normalizer(real_graph, 32, cap_by_samples=True) == pytest.approx(1.5141151, abs=1e-6)


class TestEvaluate:
    def test_end_to_end_matches_oracle(self, toy_graph):
        preds = toy_predictions(toy_graph, kind="probabilities")
        report = evaluate(toy_graph, preds, normalizer="none")
        for m in report.synsets:
            sub = toy_graph.classifiable_subtree(m.synset).leaf_indices.tolist()
            rows = preds.rows[m.synset].tolist()
            assert m.isp == pytest.approx(oracles.isp(rows, sub), abs=1e-12)
            if m.scs is None:
                assert len(sub) == 1
            else:
                assert m.scs == pytest.approx(oracles.scs(rows, sub), abs=1e-12)
        assert report.n_scs_excluded == 1

    def test_isp_monotone_up_the_hierarchy(self, toy_graph):
        preds = toy_predictions(toy_graph, kind="logits")
        rows = preds.rows["n00000003"]
        child = isp(rows, toy_graph.classifiable_subtree("n00000003").leaf_indices, "logits")
        parent = isp(rows, toy_graph.classifiable_subtree("n00000002").leaf_indices, "logits")
        assert child <= parent

    def test_missing_synset_named(self, toy_graph):
        preds = toy_predictions(toy_graph)
        del preds.rows["n00000004"]
        with pytest.raises(MetricError, match="n00000004"):
            evaluate(toy_graph, preds)

    def test_class_mismatch(self, toy_graph):
        preds = PredictionSet("logits", {s: np.zeros((2, 5)) for s in toy_graph.evaluation_set()})
        with pytest.raises(MetricError, match="5 classes"):
            evaluate(toy_graph, preds)

    def test_jobs_do_not_change_bytes(self, toy_graph):
        preds = toy_predictions(toy_graph, n=5)
        assert evaluate(toy_graph, preds, jobs=1).to_json() == evaluate(toy_graph, preds, jobs=3).to_json()

    def test_subset(self, toy_graph):
        out = evaluate_synsets(toy_graph, toy_predictions(toy_graph), synsets=["n00000004", "n00000003"])
        assert [m.synset for m in out] == ["n00000003", "n00000004"]


class TestReportIO:
    def test_json_round_trip(self, toy_graph, tmp_path):
        report = evaluate(toy_graph, toy_predictions(toy_graph))
        path = tmp_path / "r.json"
        path.write_text(report.to_json())
        again = load_report(path)
        assert again.to_json() == report.to_json()
        assert isinstance(again, MetricReport)

    def test_csv(self, toy_graph):
        report = evaluate(toy_graph, toy_predictions(toy_graph))
        lines = report.to_csv().splitlines()
        assert lines[0] == "synset,isp,scs,subtree_size,n_samples"
        assert len(lines) == 7
        boat = [x for x in lines if x.startswith("n00000006")][0]
        assert boat.split(",")[2] == ""

    def test_values_skip_excluded(self, toy_graph):
        report = evaluate(toy_graph, toy_predictions(toy_graph))
        assert "n00000006" not in report.values("scs")
        assert "n00000006" in report.values("isp")
        with pytest.raises(ValueError):
            report.values("fid")

    def test_json_is_plain(self, toy_graph):
        d = json.loads(evaluate(toy_graph, toy_predictions(toy_graph)).to_json())
        assert d["n_synsets"] == 6 and d["normalizer_mode"] == "derived"
