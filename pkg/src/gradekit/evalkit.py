"""Chance-corrected agreement metrics and benchmark-table rendering.

Quadratic weighted kappa follows the standard Cohen construction:
kappa = 1 - sum(w * O) / sum(w * E) with w[i][j] = (i - j)^2 / (K - 1)^2,
O the joint proportion matrix and E the outer product of the two
marginals. K always spans the item's full declared score range, so the
+-1 endpoints behave as advertised even when categories go unobserved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "AgreementReport",
    "qwk",
    "accuracy",
    "agreement_report",
    "render_benchmark",
    "BenchmarkTable",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K paired-score counts; rows are rater A, columns rater B."""

    counts: np.ndarray
    offset: int

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_scores(
        cls, a: Sequence[int], b: Sequence[int], min_score: int, max_score: int
    ) -> "ConfusionMatrix":
        a_arr, b_arr = _validate_pairs(a, b, min_score, max_score)
        k = max_score - min_score + 1
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (a_arr - min_score, b_arr - min_score), 1)
        return cls(counts=counts, offset=min_score)


@dataclass(frozen=True)
class AgreementReport:
    qwk: float
    accuracy: float
    n: int


def _validate_pairs(a, b, min_score: int | None = None, max_score: int | None = None):
    a_arr = np.asarray(list(a), dtype=np.int64)
    b_arr = np.asarray(list(b), dtype=np.int64)
    if a_arr.ndim != 1 or a_arr.shape != b_arr.shape:
        raise ValueError(f"paired score lists must have equal length, got {a_arr.shape} and {b_arr.shape}")
    if a_arr.size == 0:
        raise ValueError("paired score lists must be nonempty")
    if min_score is not None:
        lo = min(a_arr.min(), b_arr.min())
        hi = max(a_arr.max(), b_arr.max())
        if lo < min_score or hi > max_score:
            raise ValueError(
                f"score outside declared range [{min_score}, {max_score}]: observed [{lo}, {hi}]"
            )
    return a_arr, b_arr


def _symmetric_sum(x: np.ndarray) -> float:
    """Sum all cells, pairing (i, j) with (j, i) first.

    Addition of each transposed pair commutes exactly in floating point,
    so the total is bit-identical under matrix transposition. That makes
    qwk(a, b) == qwk(b, a) exact rather than approximate.
    """
    total = 0.0
    k = x.shape[0]
    for i in range(k):
        total += float(x[i, i])
        for j in range(i + 1, k):
            total += float(x[i, j]) + float(x[j, i])
    return total


def qwk(a: Sequence[int], b: Sequence[int], min_score: int, max_score: int) -> float:
    """Quadratic weighted kappa over the declared score range.

    1 is exact agreement, 0 chance-level agreement, -1 perfect
    disagreement. When both raters use a single identical category the
    statistic is 0/0; that degenerate case returns 1.0 with a warning.
    """
    if max_score < min_score:
        raise ValueError(f"empty score range [{min_score}, {max_score}]")
    cm = ConfusionMatrix.from_scores(a, b, min_score, max_score)
    k = cm.k
    n = cm.n
    if k == 1:
        warnings.warn("single-category score range; agreement is trivially 1.0", stacklevel=2)
        return 1.0
    idx = np.arange(k, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    observed = cm.counts.astype(np.float64) / n
    hist_a = cm.counts.sum(axis=1).astype(np.float64) / n
    hist_b = cm.counts.sum(axis=0).astype(np.float64) / n
    expected = np.outer(hist_a, hist_b)
    num = _symmetric_sum(w * observed)
    den = _symmetric_sum(w * expected)
    if den == 0.0:
        warnings.warn(
            "all observations share one category; chance disagreement is zero, returning 1.0",
            stacklevel=2,
        )
        return 1.0
    return 1.0 - num / den


def accuracy(a: Sequence[int], b: Sequence[int]) -> float:
    """Fraction of exact matches."""
    a_arr, b_arr = _validate_pairs(a, b)
    return float((a_arr == b_arr).mean())


def agreement_report(
    a: Sequence[int], b: Sequence[int], min_score: int, max_score: int
) -> AgreementReport:
    return AgreementReport(
        qwk=qwk(a, b, min_score, max_score),
        accuracy=accuracy(a, b),
        n=len(list(a)),
    )


# ---------------------------------------------------------------------------
# benchmark table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkTable:
    item_ids: tuple[str, ...]
    row_names: tuple[str, ...]
    cells: Mapping[str, Mapping[str, float]]  # row -> item -> qwk

    def _formatted(self, row: str, item: str) -> str:
        value = self.cells[row].get(item)
        return "" if value is None else f"{value:.3f}"

    def _avg(self, row: str) -> str:
        covered = [v for v in self.cells[row].values() if v is not None]
        if not covered:
            return ""
        return f"{sum(covered) / len(covered):.3f}"

    def to_tsv(self) -> str:
        lines = ["\t".join(["Model", *self.item_ids, "Avg."])]
        for row in self.row_names:
            cells = [self._formatted(row, item) for item in self.item_ids]
            lines.append("\t".join([row, *cells, self._avg(row)]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ["Model", *self.item_ids, "Avg."]
        rows = [
            [row, *(self._formatted(row, item) for item in self.item_ids), self._avg(row)]
            for row in self.row_names
        ]
        widths = [
            max(len(header[c]), *(len(r[c]) for r in rows)) if rows else len(header[c])
            for c in range(len(header))
        ]
        def fmt(cells):
            first = cells[0].ljust(widths[0])
            rest = [cells[c].rjust(widths[c]) for c in range(1, len(cells))]
            return "  ".join([first, *rest]).rstrip()

        return "\n".join([fmt(header), *(fmt(r) for r in rows)]) + "\n"


def render_benchmark(
    rows: Mapping[str, Mapping[str, Sequence[int]]],
    gold: Mapping[str, Sequence[int]],
    ranges: Mapping[str, tuple[int, int]],
    item_order: Sequence[str] | None = None,
) -> BenchmarkTable:
    """Per-item QWK to three decimals plus an unweighted average column.

    Rows may cover a subset of items; uncovered items render blank and
    the average spans only the covered ones. Every covered item needs a
    gold column and a declared range.
    """
    item_ids = tuple(item_order) if item_order is not None else tuple(sorted(gold))
    cells: dict[str, dict[str, float]] = {}
    for row_name, predictions in rows.items():
        row_cells: dict[str, float] = {}
        for item in item_ids:
            preds = predictions.get(item)
            if preds is None:
                continue
            if item not in gold:
                raise ValueError(f"no gold scores for item {item!r}")
            if item not in ranges:
                raise ValueError(f"no declared score range for item {item!r}")
            lo, hi = ranges[item]
            row_cells[item] = qwk(preds, gold[item], lo, hi)
        cells[row_name] = row_cells
    return BenchmarkTable(item_ids=item_ids, row_names=tuple(rows), cells=cells)
