"""Scored-response ingestion, item registry, and train/dev/test splits.

The canonical input is a UTF-8 TSV with a header row naming
``id  item  response  rater1  rater2`` and optionally ``resolved``.
Item metadata (kind, score range, resolution rule, rubric) lives in a
registry, either the bundled one mirroring the public AES/SAS item
characteristics or a JSON manifest supplied by the operator.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ScoredResponse",
    "ItemSpec",
    "SplitSpec",
    "DatasetSummary",
    "DataError",
    "ParseError",
    "RowValidationError",
    "SplitError",
    "ingest",
    "resolve_score",
    "make_splits",
    "asap_registry",
    "load_registry",
    "save_registry",
    "write_tsv",
    "make_keyword_dataset",
    "keyword_score",
]


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class RowValidationError(DataError):
    pass


class SplitError(DataError):
    pass


KINDS = ("essay", "short_answer")
RESOLVED_RULES = ("sum_of_raters", "adjudicated")


@dataclass(frozen=True)
class ItemSpec:
    item: str
    kind: str
    min_score: int
    max_score: int
    rubric_text: str = ""
    resolved_rule: str = "adjudicated"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.resolved_rule not in RESOLVED_RULES:
            raise ValueError(f"unknown resolved_rule {self.resolved_rule!r}")
        if self.min_score >= self.max_score:
            raise ValueError(
                f"item {self.item}: min_score {self.min_score} must be below "
                f"max_score {self.max_score}"
            )


@dataclass(frozen=True)
class ScoredResponse:
    id: str
    item: str
    text: str
    rater1: int
    rater2: int
    resolved: int

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"response {self.id}: text must be nonempty")


# score ranges and resolution rules of the public benchmark items;
# essay sets 1, 7 and 8 resolve as the sum of the two rater scores
_ASAP_ITEMS = [
    ("aes1", "essay", 2, 12, "sum_of_raters"),
    ("aes2", "essay", 1, 6, "adjudicated"),
    ("aes3", "essay", 0, 3, "adjudicated"),
    ("aes4", "essay", 0, 3, "adjudicated"),
    ("aes5", "essay", 0, 4, "adjudicated"),
    ("aes6", "essay", 0, 4, "adjudicated"),
    ("aes7", "essay", 2, 24, "sum_of_raters"),
    ("aes8", "essay", 10, 60, "sum_of_raters"),
    ("sas1", "short_answer", 0, 3, "adjudicated"),
    ("sas2", "short_answer", 0, 3, "adjudicated"),
    ("sas3", "short_answer", 0, 2, "adjudicated"),
    ("sas4", "short_answer", 0, 2, "adjudicated"),
    ("sas5", "short_answer", 0, 3, "adjudicated"),
    ("sas6", "short_answer", 0, 3, "adjudicated"),
    ("sas7", "short_answer", 0, 2, "adjudicated"),
    ("sas8", "short_answer", 0, 2, "adjudicated"),
    ("sas9", "short_answer", 0, 2, "adjudicated"),
    ("sas10", "short_answer", 0, 2, "adjudicated"),
]


def asap_registry(rubrics: Mapping[str, str] | None = None) -> dict[str, ItemSpec]:
    """Bundled registry of the benchmark items; rubric texts are operator-supplied."""
    rubrics = rubrics or {}
    return {
        item: ItemSpec(
            item=item,
            kind=kind,
            min_score=lo,
            max_score=hi,
            rubric_text=rubrics.get(item, ""),
            resolved_rule=rule,
        )
        for item, kind, lo, hi, rule in _ASAP_ITEMS
    }


def load_registry(path) -> dict[str, ItemSpec]:
    """Read a registry manifest; rubric files resolve relative to it."""
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("format_version") != 1:
        raise DataError(f"{path}: unsupported registry format version")
    registry: dict[str, ItemSpec] = {}
    for entry in payload["items"]:
        rubric = entry.get("rubric_text", "")
        rubric_file = entry.get("rubric_file")
        if rubric_file:
            rubric = (path.parent / rubric_file).read_text(encoding="utf-8")
        spec = ItemSpec(
            item=entry["item"],
            kind=entry["kind"],
            min_score=int(entry["min_score"]),
            max_score=int(entry["max_score"]),
            rubric_text=rubric,
            resolved_rule=entry.get("resolved_rule", "adjudicated"),
        )
        registry[spec.item] = spec
    return registry


def save_registry(path, registry: Mapping[str, ItemSpec]) -> None:
    """Write a manifest plus one rubric file per item next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = []
    for spec in registry.values():
        rubric_file = f"rubric_{spec.item}.txt"
        (path.parent / rubric_file).write_text(spec.rubric_text, encoding="utf-8")
        items.append(
            {
                "item": spec.item,
                "kind": spec.kind,
                "min_score": spec.min_score,
                "max_score": spec.max_score,
                "resolved_rule": spec.resolved_rule,
                "rubric_file": rubric_file,
            }
        )
    path.write_text(
        json.dumps({"format_version": 1, "items": items}, indent=2) + "\n", encoding="utf-8"
    )


def resolve_score(r1: int, r2: int, rule: str, resolved: int | None = None) -> int:
    """sum_of_raters adds the two scores; adjudicated passes the data through."""
    if rule == "sum_of_raters":
        return int(r1) + int(r2)
    if rule == "adjudicated":
        if resolved is None:
            raise DataError("adjudicated rule requires a resolved column")
        return int(resolved)
    raise ValueError(f"unknown resolved rule {rule!r}")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ItemSummary:
    item: str
    count: int
    avg_words: float
    observed_min: int
    observed_max: int
    declared_min: int
    declared_max: int


@dataclass(frozen=True)
class DatasetSummary:
    total: int
    items: dict[str, ItemSummary]

    def to_text(self) -> str:
        lines = [f"responses: {self.total}"]
        for s in self.items.values():
            lines.append(
                f"  {s.item}: n={s.count} avg_words={s.avg_words:.1f} "
                f"scores {s.observed_min}..{s.observed_max} "
                f"(declared {s.declared_min}..{s.declared_max})"
            )
        return "\n".join(lines)


_REQUIRED_COLUMNS = ("id", "item", "response", "rater1", "rater2")


def ingest(path, registry: Mapping[str, ItemSpec]) -> tuple[list[ScoredResponse], DatasetSummary]:
    """Parse a scored-response TSV in file order and summarize it per item."""
    path = Path(path)
    responses: list[ScoredResponse] = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        col = {name: i for i, name in enumerate(header)}
        missing = [c for c in _REQUIRED_COLUMNS if c not in col]
        if missing:
            raise ParseError(f"{path}: header is missing columns {missing}")
        has_resolved = "resolved" in col
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}"
                )
            rid = row[col["id"]]
            item_id = row[col["item"]]
            if item_id not in registry:
                raise RowValidationError(f"row {rid!r}: unknown item {item_id!r}")
            spec = registry[item_id]
            try:
                r1 = int(row[col["rater1"]])
                r2 = int(row[col["rater2"]])
                provided = int(row[col["resolved"]]) if has_resolved else None
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer score ({exc})") from None
            resolved = resolve_score(r1, r2, spec.resolved_rule, provided)
            if not spec.min_score <= resolved <= spec.max_score:
                raise RowValidationError(
                    f"row {rid!r}: resolved score {resolved} outside "
                    f"[{spec.min_score}, {spec.max_score}] for item {item_id}"
                )
            text = row[col["response"]]
            if not text:
                raise RowValidationError(f"row {rid!r}: empty response text")
            responses.append(
                ScoredResponse(
                    id=rid, item=item_id, text=text, rater1=r1, rater2=r2, resolved=resolved
                )
            )
    return responses, summarize(responses, registry)


def summarize(
    responses: Sequence[ScoredResponse], registry: Mapping[str, ItemSpec]
) -> DatasetSummary:
    items: dict[str, ItemSummary] = {}
    for item_id in sorted({r.item for r in responses}):
        rows = [r for r in responses if r.item == item_id]
        spec = registry[item_id]
        items[item_id] = ItemSummary(
            item=item_id,
            count=len(rows),
            avg_words=float(np.mean([len(r.text.split()) for r in rows])),
            observed_min=min(r.resolved for r in rows),
            observed_max=max(r.resolved for r in rows),
            declared_min=spec.min_score,
            declared_max=spec.max_score,
        )
    return DatasetSummary(total=len(responses), items=items)


def write_tsv(path, responses: Sequence[ScoredResponse]) -> None:
    """Canonical TSV writer; response text must be tab- and newline-free."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "item", "response", "rater1", "rater2", "resolved"])
        for r in responses:
            if "\t" in r.text or "\n" in r.text:
                raise DataError(f"response {r.id}: text contains tab or newline")
            writer.writerow([r.id, r.item, r.text, r.rater1, r.rater2, r.resolved])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: dict[str, list[str]]
    dev: dict[str, list[str]]
    test: dict[str, list[str]]
    folds: dict[str, list[list[str]]] | None = None

    def for_item(self, item: str) -> tuple[list[str], list[str], list[str]]:
        return self.train[item], self.dev[item], self.test[item]

    def items(self) -> list[str]:
        return sorted(self.train)


def _check_split(item: str, ids: list[str], parts: dict[str, list[str]]) -> None:
    combined: list[str] = [i for p in parts.values() for i in p]
    if len(set(combined)) != len(combined):
        raise SplitError(f"item {item}: splits overlap")
    missing = sorted(set(combined) - set(ids))
    if missing:
        raise SplitError(f"item {item}: split ids not present in data: {missing}")
    uncovered = sorted(set(ids) - set(combined))
    if uncovered:
        raise SplitError(f"item {item}: responses not covered by any split: {uncovered}")


def make_splits(
    responses: Sequence[ScoredResponse],
    scheme: str,
    seed: int = 0,
    manifest: Mapping[str, Mapping[str, list[str]]] | str | Path | None = None,
    n_folds: int = 5,
    fold: int = 0,
) -> SplitSpec:
    """Deterministic splits per item.

    ``five_fold`` shuffles ids with the seed, cuts equal-as-possible
    folds, and materializes the requested fold: that fold is the test
    set, the next fold (cyclically) is dev, and the rest train.
    ``fixed`` loads id lists from a manifest.
    """
    if not responses:
        raise DataError("cannot split an empty response list")
    by_item: dict[str, list[str]] = {}
    for r in responses:
        by_item.setdefault(r.item, []).append(r.id)
    if scheme == "five_fold":
        if not 0 <= fold < n_folds:
            raise SplitError(f"fold {fold} outside 0..{n_folds - 1}")
        train: dict[str, list[str]] = {}
        dev: dict[str, list[str]] = {}
        test: dict[str, list[str]] = {}
        folds: dict[str, list[list[str]]] = {}
        rng = np.random.default_rng(seed)
        for item in sorted(by_item):
            ids = by_item[item]
            order = rng.permutation(len(ids))
            shuffled = [ids[i] for i in order]
            folds[item] = [list(part) for part in np.array_split(shuffled, n_folds)]
            test[item] = list(folds[item][fold])
            dev[item] = list(folds[item][(fold + 1) % n_folds])
            train[item] = [
                i
                for f_idx, part in enumerate(folds[item])
                if f_idx not in (fold, (fold + 1) % n_folds)
                for i in part
            ]
            _check_split(item, ids, {"train": train[item], "dev": dev[item], "test": test[item]})
        return SplitSpec(train=train, dev=dev, test=test, folds=folds)
    if scheme == "fixed":
        if manifest is None:
            raise SplitError("fixed scheme requires a split manifest")
        if isinstance(manifest, (str, Path)):
            manifest = json.loads(Path(manifest).read_text(encoding="utf-8"))
        train, dev, test = {}, {}, {}
        for item, parts in manifest.items():
            if item not in by_item:
                raise SplitError(f"manifest names unknown item {item!r}")
            split = {k: list(parts.get(k, [])) for k in ("train", "dev", "test")}
            _check_split(item, by_item[item], split)
            train[item], dev[item], test[item] = split["train"], split["dev"], split["test"]
        return SplitSpec(train=train, dev=dev, test=test)
    raise ValueError(f"unknown split scheme {scheme!r}")


# ---------------------------------------------------------------------------
# synthetic keyword-count task
# ---------------------------------------------------------------------------

KEYWORD_ITEM_RUBRIC = (
    "Award one point each time the response mentions the word '{marker}', "
    "up to a maximum of 3 points. Unrelated words earn nothing."
)

_FILLER_WORDS = (
    "the plant cell wall keeps water moving through small roots and leaves "
    "while light warms the soil so growth continues during long spring days "
    "because air sugar and minerals travel between layers"
).split()


def keyword_score(text: str, marker: str, max_score: int = 3) -> int:
    """Brute-force oracle for the synthetic task: clamped marker count."""
    return min(sum(w == marker for w in text.split()), max_score)


def make_keyword_dataset(
    n: int,
    seed: int = 0,
    marker: str = "evidence",
    item_id: str = "demo",
    response_len: int = 24,
) -> tuple[list[ScoredResponse], ItemSpec]:
    """Responses whose score is the clamped count of a marker word.

    Scores are balanced over 0..3 and both raters agree with the
    resolved score, so a keyword counter reproduces the gold labels
    exactly: the task is learnable by construction.
    """
    spec = ItemSpec(
        item=item_id,
        kind="short_answer",
        min_score=0,
        max_score=3,
        rubric_text=KEYWORD_ITEM_RUBRIC.format(marker=marker),
        resolved_rule="adjudicated",
    )
    rng = np.random.default_rng(seed)
    responses = []
    for i in range(n):
        count = i % 4
        words = [str(_FILLER_WORDS[j]) for j in rng.integers(0, len(_FILLER_WORDS), response_len)]
        if count:
            positions = rng.choice(response_len, size=count, replace=False)
            for p in positions:
                words[int(p)] = marker
        # guard against fillers colliding with the marker (they never do,
        # but the oracle must hold by construction)
        text = " ".join(words)
        assert keyword_score(text, marker) == count
        responses.append(
            ScoredResponse(
                id=f"{item_id}-{i:04d}",
                item=item_id,
                text=text,
                rater1=count,
                rater2=count,
                resolved=count,
            )
        )
    return responses, spec
