import math

import numpy as np
import pytest

from emonet import evaluation as ev
from emonet.errors import (
    ConfigError,
    EmptyMatrix,
    LabelOutOfRange,
    LengthMismatch,
    MisalignedRuns,
)


class TestConfusion:
    def test_counts(self):
        conf = ev.confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2)
        np.testing.assert_array_equal(conf, [[1, 1], [1, 2]])

    def test_rows_are_reference(self):
        conf = ev.confusion_matrix([0, 0, 0], [1, 1, 1], 2)
        np.testing.assert_array_equal(conf, [[0, 3], [0, 0]])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ev.confusion_matrix([0, 1], [0], 2)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            ev.confusion_matrix([0, 2], [0, 1], 2)


class TestUAR:
    def test_diagonal_perfect(self):
        assert ev.uar(np.diag([3, 1, 7])) == 1.0

    def test_worked_example(self):
        # recalls 5/5 = 1.0 and 3/5 = 0.6; mean 0.8
        assert ev.uar(np.array([[5, 0], [2, 3]])) == pytest.approx(0.8)

    def test_constant_predictor_balanced(self):
        conf = ev.confusion_matrix([0, 0, 1, 1, 2, 2], [0, 0, 0, 0, 0, 0], 3)
        assert ev.uar(conf) == pytest.approx(1.0 / 3.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        conf = rng.integers(0, 9, size=(4, 4))
        perm = rng.permutation(4)
        assert ev.uar(conf) == pytest.approx(ev.uar(conf[np.ix_(perm, perm)]))

    def test_balanced_reference_equals_accuracy(self):
        ref = [0, 0, 0, 1, 1, 1]
        pred = [0, 1, 0, 1, 1, 0]
        conf = ev.confusion_matrix(ref, pred, 2)
        accuracy = np.mean(np.array(ref) == np.array(pred))
        assert ev.uar(conf) == pytest.approx(accuracy)

    def test_absent_class_excluded(self):
        conf = np.array([[2, 0, 0], [0, 3, 0], [0, 0, 0]])
        assert ev.uar(conf) == pytest.approx(1.0)
        assert ev.per_class_recalls(conf)[2] is None

    def test_empty_matrix(self):
        with pytest.raises(EmptyMatrix):
            ev.uar(np.zeros((3, 3), dtype=np.int64))


class TestChance:
    @pytest.mark.parametrize("k,expected", [(7, 1 / 7), (2, 0.5), (4, 0.25)])
    def test_values(self, k, expected):
        assert ev.chance_level(k) == pytest.approx(expected)

    def test_matches_reported_percentages(self):
        assert round(100 * ev.chance_level(7), 1) == 14.3
        assert round(100 * ev.chance_level(2), 1) == 50.0
        assert round(100 * ev.chance_level(4), 1) == 25.0

    def test_k_times_chance_is_one(self):
        for k in range(2, 30):
            assert ev.chance_level(k) * k == pytest.approx(1.0, abs=1e-15)

    def test_k_below_two(self):
        with pytest.raises(ConfigError):
            ev.chance_level(1)


def preds_with_discordants(b, c, n_total=None):
    """Reference all-zero; baseline/candidate patterns giving exact b and c."""
    n = b + c if n_total is None else n_total
    assert n >= b + c
    ref = [0] * n
    base = [0] * n
    cand = [0] * n
    for i in range(b):  # baseline right, candidate wrong
        cand[i] = 1
    for i in range(b, b + c):  # baseline wrong, candidate right
        base[i] = 1
    for i in range(b + c, n):  # concordant padding in a second class
        ref[i] = base[i] = cand[i] = 1
    return base, cand, ref


class TestMcNemar:
    def test_worked_example_statistic(self):
        base, cand, ref = preds_with_discordants(15, 5)
        r = ev.mcnemar(base, cand, ref)
        assert (r.b, r.c) == (15, 5)
        assert r.statistic == pytest.approx((abs(15 - 5) - 1) ** 2 / 20)  # 4.05
        assert r.statistic == pytest.approx(4.05)
        # b+c = 20 < 25: exact branch; p = 2 * sum_{i<=5} C(20,i)/2^20
        expected_p = 2 * sum(math.comb(20, i) for i in range(6)) / 2**20
        assert r.method == "exact"
        assert r.p_value == pytest.approx(expected_p)
        assert r.significant_at_05
        assert r.direction == "decrease"

    def test_chi2_branch(self):
        base, cand, ref = preds_with_discordants(40, 15)
        r = ev.mcnemar(base, cand, ref)
        assert r.method == "chi2"
        assert r.statistic == pytest.approx(576 / 55)
        assert r.significant_at_05 and r.direction == "decrease"

    def test_improvement_mark_case(self):
        # candidate flips 20 errors to correct and 2 correct to error
        base, cand, ref = preds_with_discordants(2, 20)
        r = ev.mcnemar(base, cand, ref)
        assert r.significant_at_05 and r.direction == "improvement"

    @pytest.mark.parametrize("b,c", [(3, 3), (15, 15)])
    def test_symmetric_counts_not_significant(self, b, c):
        base, cand, ref = preds_with_discordants(b, c)
        r = ev.mcnemar(base, cand, ref)
        assert not r.significant_at_05
        assert r.direction == "none"

    def test_identical_predictions(self):
        ref = [0, 1, 0, 1]
        pred = [0, 1, 1, 1]
        r = ev.mcnemar(pred, pred, ref)
        assert (r.b, r.c) == (0, 0)
        assert r.statistic == 0.0
        assert r.p_value == 1.0
        assert not r.significant_at_05

    def test_swap_symmetry(self):
        base, cand, ref = preds_with_discordants(17, 4, n_total=30)
        fwd = ev.mcnemar(base, cand, ref)
        rev = ev.mcnemar(cand, base, ref)
        assert (fwd.b, fwd.c) == (rev.c, rev.b)
        assert fwd.significant_at_05 == rev.significant_at_05
        assert (fwd.direction, rev.direction) == ("decrease", "improvement")

    def test_exact_p_capped_at_one(self):
        base, cand, ref = preds_with_discordants(3, 3)
        assert ev.mcnemar(base, cand, ref).p_value == 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ev.mcnemar([0, 1], [0], [0, 1])


class TestEvalReport:
    def test_fields(self):
        ref = [0] * 5 + [1] * 5
        pred = [0] * 5 + [0, 0, 1, 1, 1]
        report = ev.evaluate(ref, pred, ["ang", "sad"], "demo", "test")
        assert report.uar == pytest.approx(0.8)
        assert report.chance == 0.5
        assert report.confusion == [[5, 0], [2, 3]]
        assert report.per_class_recall == {"ang": 1.0, "sad": 0.6}
        assert report.n_samples == 10
        assert report.excluded_classes == []

    def test_excluded_reported(self):
        report = ev.evaluate([0, 1], [0, 1], ["a", "b", "c"], "demo", "devel")
        assert report.excluded_classes == ["c"]

    def test_text_and_json_render(self):
        report = ev.evaluate([0, 1], [0, 0], ["a", "b"], "demo", "test")
        text = ev.format_report(report)
        assert "uar" in text and "chance" in text and "demo" in text
        import json

        doc = json.loads(report.to_json())
        assert doc["uar"] == pytest.approx(0.5)


class TestPredictionsFileAndCompare:
    def write(self, path, ids, refs, preds):
        ev.write_predictions(path, ids, refs, preds)

    def test_round_trip(self, tmp_path):
        p = tmp_path / "p.csv"
        self.write(p, ["s1", "s2"], ["a", "b"], ["a", "a"])
        assert ev.read_predictions(p) == (["s1", "s2"], ["a", "b"], ["a", "a"])

    def test_identical_candidate_unmarked(self, tmp_path):
        ids = [f"s{i}" for i in range(10)]
        refs = ["a", "b"] * 5
        preds = ["a", "a"] * 5
        p0, p1 = tmp_path / "p0.csv", tmp_path / "p1.csv"
        self.write(p0, ids, refs, preds)
        self.write(p1, ids, refs, preds)
        table = ev.compare(p0, [p1])
        assert table.rows[0].mark == ""
        assert table.rows[0].mcnemar.b == table.rows[0].mcnemar.c == 0
        assert table.baseline_uar == table.rows[0].uar

    def test_improvement_marked(self, tmp_path):
        base, cand, ref = preds_with_discordants(2, 20, n_total=40)
        ids = [f"s{i}" for i in range(40)]
        to_label = lambda xs: ["yes" if x == 0 else "no" for x in xs]
        p0, p1 = tmp_path / "p0.csv", tmp_path / "p1.csv"
        self.write(p0, ids, to_label(ref), to_label(base))
        self.write(p1, ids, to_label(ref), to_label(cand))
        table = ev.compare(p0, [p1])
        assert table.rows[0].mark == "+"

    def test_three_candidates(self, tmp_path):
        ids, refs, preds = ["s1", "s2"], ["a", "b"], ["a", "b"]
        paths = []
        for i in range(4):
            p = tmp_path / f"p{i}.csv"
            self.write(p, ids, refs, preds)
            paths.append(p)
        table = ev.compare(paths[0], paths[1:])
        assert [r.name for r in table.rows] == ["p1", "p2", "p3"]
        text = ev.format_compare(table)
        assert "p0" in text and "(baseline)" in text

    def test_misaligned_ids(self, tmp_path):
        p0, p1 = tmp_path / "p0.csv", tmp_path / "p1.csv"
        self.write(p0, ["s1", "s2"], ["a", "b"], ["a", "b"])
        self.write(p1, ["s1", "sX"], ["a", "b"], ["a", "b"])
        with pytest.raises(MisalignedRuns):
            ev.compare(p0, [p1])

    def test_misaligned_reference(self, tmp_path):
        p0, p1 = tmp_path / "p0.csv", tmp_path / "p1.csv"
        self.write(p0, ["s1", "s2"], ["a", "b"], ["a", "b"])
        self.write(p1, ["s1", "s2"], ["a", "a"], ["a", "b"])
        with pytest.raises(MisalignedRuns):
            ev.compare(p0, [p1])

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("sample_id,reference,prediction\n")
        with pytest.raises(MisalignedRuns):
            ev.read_predictions(p)
