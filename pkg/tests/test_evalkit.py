from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradekit import evalkit

GOLDEN_TABLE = Path(__file__).parent / "golden" / "benchmark_table.txt"


def brute_force_qwk(a, b, min_score, max_score):
    """Independent O/E computation straight from the definition."""
    k = max_score - min_score + 1
    if k == 1:
        return 1.0
    n = len(a)
    observed = [[0.0] * k for _ in range(k)]
    for x, y in zip(a, b):
        observed[x - min_score][y - min_score] += 1.0 / n
    hist_a = [sum(row) for row in observed]
    hist_b = [sum(observed[i][j] for i in range(k)) for j in range(k)]
    num = den = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / (k - 1) ** 2
            num += w * observed[i][j]
            den += w * hist_a[i] * hist_b[j]
    if den == 0.0:
        return 1.0
    return 1.0 - num / den


class TestQwk:
    def test_exact_agreement_is_one(self):
        assert evalkit.qwk([0, 1, 2, 3], [0, 1, 2, 3], 0, 3) == 1.0

    def test_perfect_disagreement_is_minus_one(self):
        assert evalkit.qwk([0, 3], [3, 0], 0, 3) == pytest.approx(
            brute_force_qwk([0, 3], [3, 0], 0, 3), abs=1e-12
        )
        assert evalkit.qwk([0, 3], [3, 0], 0, 3) == pytest.approx(-1.0, abs=1e-12)

    def test_degenerate_single_category_warns_one(self):
        with pytest.warns(UserWarning):
            assert evalkit.qwk([2, 2, 2], [2, 2, 2], 0, 3) == 1.0

    def test_range_validation(self):
        with pytest.raises(ValueError, match="range"):
            evalkit.qwk([0, 5], [0, 1], 0, 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            evalkit.qwk([0, 1], [0], 0, 3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            evalkit.qwk([], [], 0, 3)

    def test_widening_declared_range_leaves_kappa_unchanged(self):
        # the (K-1)^2 weight normalization cancels in the num/den ratio, so
        # unobserved categories cannot move the statistic; the declared range
        # exists for validation and for the +-1 endpoint semantics
        rng = np.random.default_rng(10)
        for _ in range(10):
            n = int(rng.integers(2, 20))
            a = rng.integers(0, 2, size=n).tolist()
            b = rng.integers(0, 2, size=n).tolist()
            narrow = evalkit.qwk(a, b, 0, 1)
            wide = evalkit.qwk(a, b, 0, 3)
            assert wide == pytest.approx(narrow, abs=1e-12)
            assert wide == pytest.approx(brute_force_qwk(a, b, 0, 3), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force_on_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        a = rng.integers(0, 4, size=n).tolist()
        b = rng.integers(0, 4, size=n).tolist()
        assert evalkit.qwk(a, b, 0, 3) == pytest.approx(brute_force_qwk(a, b, 0, 3), abs=1e-12)

    def test_exhaustive_short_lists(self):
        # every confusion matrix with n <= 3 over 3 categories
        pair_types = [(i, j) for i in range(3) for j in range(3)]
        for n in range(1, 4):
            for combo in combinations_with_replacement(pair_types, n):
                a = [p[0] for p in combo]
                b = [p[1] for p in combo]
                got = evalkit.qwk(a, b, 0, 2)
                want = brute_force_qwk(a, b, 0, 2)
                assert got == pytest.approx(want, abs=1e-12)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            n = int(rng.integers(1, 30))
            a = rng.integers(0, 5, size=n).tolist()
            b = rng.integers(0, 5, size=n).tolist()
            assert evalkit.qwk(a, b, 0, 4) == evalkit.qwk(b, a, 0, 4)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(12)
        a = rng.integers(0, 4, size=30).tolist()
        b = rng.integers(0, 4, size=30).tolist()
        perm = rng.permutation(30)
        a2 = [a[i] for i in perm]
        b2 = [b[i] for i in perm]
        assert evalkit.qwk(a, b, 0, 3) == evalkit.qwk(a2, b2, 0, 3)
        assert evalkit.accuracy(a, b) == evalkit.accuracy(a2, b2)

    @given(
        st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=30).filter(
            lambda pairs: any(x == y for x, y in pairs)
        )
    )
    @settings(max_examples=150, deadline=None)
    def test_flip_always_increases_observed_disagreement(self, pairs):
        # the direction statement that is actually a theorem: turning an
        # agreeing pair into a maximal disagreement strictly raises the
        # observed weighted-disagreement component
        a = [p[0] for p in pairs]
        b = [p[1] for p in pairs]
        i = next(idx for idx, (x, y) in enumerate(pairs) if x == y)
        flipped = list(b)
        flipped[i] = 0 if a[i] >= 2 else 3

        def observed_disagreement(x, y):
            k = 4
            total = 0.0
            for u, v in zip(x, y):
                total += (u - v) ** 2 / (k - 1) ** 2
            return total / len(x)

        assert observed_disagreement(a, flipped) > observed_disagreement(a, b)

    def test_single_flip_can_raise_qwk_documented_counterexample(self):
        # kappa is chance-corrected: a flip also moves the marginals that
        # define expected disagreement, so QWK itself is NOT monotone under
        # single flips. This pins the known counterexample so the behavior
        # stays visible: flipping the agreeing (2, 2) pair to (2, 0) raises
        # kappa from -2/7 to 0, and the brute-force oracle concurs.
        before = evalkit.qwk([2, 3], [2, 0], 0, 3)
        after = evalkit.qwk([2, 3], [0, 0], 0, 3)
        assert before == pytest.approx(brute_force_qwk([2, 3], [2, 0], 0, 3), abs=1e-12)
        assert after == pytest.approx(brute_force_qwk([2, 3], [0, 0], 0, 3), abs=1e-12)
        assert before == pytest.approx(-2.0 / 7.0, abs=1e-12)
        assert after == pytest.approx(0.0, abs=1e-12)
        assert after > before

    def test_qwk_one_iff_diagonal(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            a = rng.integers(0, 4, size=n).tolist()
            if len(set(a)) < 2:
                a[0], a[1] = 0, 3
            assert evalkit.qwk(a, list(a), 0, 3) == 1.0
            b = list(a)
            b[0] = (b[0] + 1) % 4
            assert evalkit.qwk(a, b, 0, 3) < 1.0


class TestAccuracy:
    def test_identical(self):
        assert evalkit.accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_disjoint(self):
        assert evalkit.accuracy([0, 0], [1, 1]) == 0.0

    def test_fraction(self):
        assert evalkit.accuracy([1, 2, 3, 4], [1, 2, 0, 0]) == 0.5


class TestConfusionMatrix:
    def test_counts_and_total(self):
        cm = evalkit.ConfusionMatrix.from_scores([2, 2, 3], [2, 3, 3], 2, 3)
        assert cm.n == 3
        assert cm.counts[0, 0] == 1 and cm.counts[0, 1] == 1 and cm.counts[1, 1] == 1
        assert cm.offset == 2

    def test_report_accuracy_is_trace_over_n(self):
        a = [0, 1, 2, 2]
        b = [0, 2, 2, 1]
        cm = evalkit.ConfusionMatrix.from_scores(a, b, 0, 2)
        rep = evalkit.agreement_report(a, b, 0, 2)
        assert rep.accuracy == cm.counts.trace() / cm.n
        assert rep.n == 4


class TestBenchmark:
    def fixture_table(self):
        gold = {"1": [0, 1, 2, 3, 1], "2": [2, 2, 0, 1, 3]}
        rows = {
            "model-a": {"1": [0, 1, 2, 3, 1], "2": [2, 1, 0, 1, 3]},
            "model-b": {"1": [0, 1, 2, 2, 1]},
        }
        ranges = {"1": (0, 3), "2": (0, 3)}
        return evalkit.render_benchmark(rows, gold, ranges, item_order=["1", "2"])

    def test_perfect_single_cell(self):
        table = evalkit.render_benchmark(
            {"m": {"1": [0, 1, 2]}}, {"1": [0, 1, 2]}, {"1": (0, 3)}
        )
        tsv = table.to_tsv()
        assert "m\t1.000\t1.000" in tsv

    def test_sparse_row_average_spans_covered_items_only(self):
        table = self.fixture_table()
        lines = table.to_tsv().splitlines()
        row_b = next(line for line in lines if line.startswith("model-b"))
        cells = row_b.split("\t")
        assert cells[2] == ""  # uncovered item renders blank
        assert cells[1] == cells[3]  # average equals the single covered cell

    def test_missing_gold_rejected(self):
        with pytest.raises(ValueError, match="gold"):
            evalkit.render_benchmark(
                {"m": {"9": [0]}}, {"1": [0]}, {"9": (0, 3)}, item_order=["9"]
            )

    def test_golden_file(self):
        assert self.fixture_table().to_text() == GOLDEN_TABLE.read_text()

    def test_tsv_and_text_agree_on_values(self):
        table = self.fixture_table()
        assert "1.000" in table.to_text()
