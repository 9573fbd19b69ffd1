"""Test-time score prediction and two-stage feedback generation.

Scoring renders the grading template, ends the assistant turn with
"Score: ", and lets the model produce exactly one more token. A token
that is not a decimal integer scores 0 with a fallback flag; integer
predictions outside the item range are reported as-is and only flagged.

Feedback reuses the same filled template plus the predicted score, asks
the model to justify the score, and caps new tokens per item kind.
Short-answer feedback is seeded with a fixed sentence opener.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .glm import ContextOverflowError, DecoderModel, Tokenizer, generate
from .traindata import ItemSpec, ScoredResponse

__all__ = [
    "ScoreResult",
    "FeedbackResult",
    "BatchRow",
    "SCORE_USER_TEMPLATE",
    "FEEDBACK_USER_TEMPLATE",
    "SCORE_PREFIX",
    "FEEDBACK_INSTRUCTION",
    "SHORT_ANSWER_FEEDBACK_PREFIX",
    "ESSAY_FEEDBACK_MAX_TOKENS",
    "SHORT_ANSWER_FEEDBACK_MAX_TOKENS",
    "score_prompt_ids",
    "predict_score",
    "generate_feedback",
    "batch_score",
    "write_predictions_tsv",
    "write_feedback_jsonl",
    "clamp_for_metric",
]

# The scoring template states a lower bound of 0 regardless of the item's
# real minimum, while the feedback template uses the item minimum; both
# forms are kept verbatim. The student response fills the final slot, so
# the rendered text is a fixed prefix followed by the response.
SCORE_USER_TEMPLATE = (
    "You are a grading assistant. Assign a **Score** between 0 and {max_score} "
    "using the **Rubric** provided to a **Student Response**"
    "\n\n**Rubric**\n{rubric}\n\n**Student Response**\n"
)

FEEDBACK_USER_TEMPLATE = (
    "You are a grading assistant. Assign a **Score** between {min_score} and {max_score} "
    "using the **Rubric** provided to a **Student Response**"
    "\n\n**Rubric**\n{rubric}\n\n**Student Response**\n"
)

SCORE_PREFIX = "Score: "
FEEDBACK_INSTRUCTION = "Using the rubric, specify why you gave the response a score of {score}."
SHORT_ANSWER_FEEDBACK_PREFIX = "The response was given a score of {score} because "

ESSAY_FEEDBACK_MAX_TOKENS = 256
SHORT_ANSWER_FEEDBACK_MAX_TOKENS = 128

_INTEGER_RE = re.compile(r"-?[0-9]+")


@dataclass(frozen=True)
class ScoreResult:
    predicted: int
    raw_token: str
    fallback_used: bool
    out_of_range: bool = False


@dataclass(frozen=True)
class FeedbackResult:
    text: str
    new_token_count: int
    item_kind: str


@dataclass(frozen=True)
class BatchRow:
    id: str
    result: ScoreResult | None
    error: str = ""


def feedback_cap(kind: str) -> int:
    return SHORT_ANSWER_FEEDBACK_MAX_TOKENS if kind == "short_answer" else ESSAY_FEEDBACK_MAX_TOKENS


def score_prompt_ids(
    tokenizer: Tokenizer,
    item: ItemSpec,
    response_text: str,
    max_response_tokens: int | None = None,
) -> tuple[list[int], int]:
    """Token ids of the filled scoring prompt, ready for one-token generation.

    The response is encoded as its own token span after the template
    prefix, so truncating it to ``max_response_tokens`` never disturbs
    the surrounding template. Returns (ids, dropped_response_tokens).
    """
    prefix = SCORE_USER_TEMPLATE.format(max_score=item.max_score, rubric=item.rubric_text)
    response_ids = tokenizer.encode(response_text)
    dropped = 0
    if max_response_tokens is not None and len(response_ids) > max_response_tokens:
        dropped = len(response_ids) - max_response_tokens
        response_ids = response_ids[:max_response_tokens]
    ids = (
        [tokenizer.user_id]
        + tokenizer.encode(prefix)
        + response_ids
        + [tokenizer.end_id, tokenizer.assistant_id]
        + tokenizer.encode(SCORE_PREFIX)
    )
    return ids, dropped


def _parse_token(raw_token: str, item: ItemSpec) -> ScoreResult:
    if _INTEGER_RE.fullmatch(raw_token):
        predicted = int(raw_token)
        return ScoreResult(
            predicted=predicted,
            raw_token=raw_token,
            fallback_used=False,
            out_of_range=not item.min_score <= predicted <= item.max_score,
        )
    return ScoreResult(predicted=0, raw_token=raw_token, fallback_used=True)


def predict_score(
    model: DecoderModel, tokenizer: Tokenizer, item: ItemSpec, response_text: str
) -> ScoreResult:
    """Generate exactly one greedy token and read it as the score."""
    ids, _ = score_prompt_ids(tokenizer, item, response_text)
    if len(ids) + 1 > model.config.max_context:
        raise ContextOverflowError(
            f"scoring prompt of {len(ids)} tokens does not fit context "
            f"{model.config.max_context}; inference never truncates"
        )
    out = generate(model, ids, max_new_tokens=1)
    return _parse_token(tokenizer.token_string(out[0]), item)


def generate_feedback(
    model: DecoderModel,
    tokenizer: Tokenizer,
    item: ItemSpec,
    response_text: str,
    predicted: int,
) -> FeedbackResult:
    """Prompt for a rubric-based justification of an already-predicted score.

    The first two turns repeat the grading conversation; a short-answer
    item also seeds the assistant's reply with the mandated opener. New
    tokens are hard-capped per item kind.
    """
    user1 = FEEDBACK_USER_TEMPLATE.format(
        min_score=item.min_score, max_score=item.max_score, rubric=item.rubric_text
    )
    ids = (
        [tokenizer.user_id]
        + tokenizer.encode(user1)
        + tokenizer.encode(response_text)
        + [tokenizer.end_id, tokenizer.assistant_id]
        + tokenizer.encode(f"{SCORE_PREFIX}{predicted}")
        + [tokenizer.end_id, tokenizer.user_id]
        + tokenizer.encode(FEEDBACK_INSTRUCTION.format(score=predicted))
        + [tokenizer.end_id, tokenizer.assistant_id]
    )
    seeded = ""
    if item.kind == "short_answer":
        seeded = SHORT_ANSWER_FEEDBACK_PREFIX.format(score=predicted)
        ids += tokenizer.encode(seeded)
    cap = feedback_cap(item.kind)
    if len(ids) + 1 > model.config.max_context:
        raise ContextOverflowError(
            f"feedback prompt of {len(ids)} tokens does not fit context "
            f"{model.config.max_context}"
        )
    out = generate(model, ids, max_new_tokens=cap, stop_ids=tokenizer.stop_ids)
    body = out[:-1] if out and out[-1] in tokenizer.stop_ids else out
    return FeedbackResult(
        text=seeded + tokenizer.decode(body),
        new_token_count=len(out),
        item_kind=item.kind,
    )


# ---------------------------------------------------------------------------
# batch scoring
# ---------------------------------------------------------------------------

def batch_score(
    model: DecoderModel,
    tokenizer: Tokenizer,
    item: ItemSpec,
    responses: Sequence[ScoredResponse],
    out_path=None,
) -> list[BatchRow]:
    """Score responses in order; row-level failures land in the error column."""
    rows: list[BatchRow] = []
    for r in responses:
        try:
            rows.append(BatchRow(id=r.id, result=predict_score(model, tokenizer, item, r.text)))
        except ContextOverflowError as exc:
            rows.append(BatchRow(id=r.id, result=None, error=str(exc)))
    if out_path is not None:
        write_predictions_tsv(out_path, rows)
    return rows


def write_predictions_tsv(path, rows: Sequence[BatchRow]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "predicted", "raw_token", "fallback_used", "error"])
        for row in rows:
            if row.result is None:
                writer.writerow([row.id, "", "", "", row.error])
            else:
                res = row.result
                writer.writerow(
                    [row.id, res.predicted, res.raw_token, str(res.fallback_used).lower(), ""]
                )


def write_feedback_jsonl(path, records: Sequence[dict]) -> None:
    """One JSON object per line: id, item, predicted, feedback, token_count."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def clamp_for_metric(predictions: Sequence[int], item: ItemSpec) -> list[int]:
    """Clamp predictions into the declared range for agreement metrics.

    The decoding rules can legally produce integers outside the range
    (any integer token, plus the 0 fallback on items whose floor is
    above 0), but the agreement metrics are defined over the declared
    range only. Raw values always stay in the predictions file.
    """
    return [min(max(int(p), item.min_score), item.max_score) for p in predictions]
