"""Per-item adapter fine-tuning with score-token loss and QWK selection.

One optimizer step per example (batch size 1), learning rate decaying
linearly to zero over all steps, loss on the single resolved-score
token only. After each epoch the dev split is scored with the same
greedy one-token decoding used at test time, and the checkpoint with
the best dev QWK wins (earliest epoch on ties).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndcore as nd
from . import scorefeed
from .evalkit import qwk
from .glm import DecoderModel, Tokenizer
from .lora import adapters_to_bytes
from .quant import Opt8State, opt8_step
from .traindata import ItemSpec, ScoredResponse

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "EpochRecord",
    "Example",
    "TrainingDivergedError",
    "build_example",
    "train_item",
    "set_model_lr",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, epoch: int, example_id: str, message: str):
        super().__init__(f"epoch {epoch}, example {example_id}: {message}")
        self.epoch = epoch
        self.example_id = example_id


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 10
    batch_size: int = 1
    context_cap: int = 2048
    rank: int = 32
    alpha: float = 32.0
    seed: int = 0
    weight_decay: float = 0.0
    opt8bit: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    baseline_seconds: float | None = None

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "context_cap": self.context_cap,
            "rank": self.rank,
            "alpha": self.alpha,
            "seed": self.seed,
            "weight_decay": self.weight_decay,
            "opt8bit": self.opt8bit,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    adapter_bytes: bytes
    epoch: int
    dev_qwk: float
    config_fingerprint: str


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    dev_qwk: float
    lr: float
    wall_seconds: float


@dataclass(frozen=True)
class Example:
    input_ids: list[int]
    target_ids: list[int]
    loss_mask: list[bool]
    dropped_tokens: int = 0


def build_example(
    response: ScoredResponse, item: ItemSpec, tokenizer: Tokenizer, context_cap: int = 2048
) -> Example:
    """Scoring prompt plus the resolved-score token as the only supervised position.

    A response that overflows the context cap is tail-truncated with a
    logged warning; the template itself must fit.
    """
    ids, dropped = scorefeed.score_prompt_ids(tokenizer, item, response.text)
    score_id = tokenizer.score_token_id(response.resolved)
    if len(ids) + 1 > context_cap:
        overflow = len(ids) + 1 - context_cap
        response_len = len(tokenizer.encode(response.text))
        if overflow >= response_len:
            raise ValueError(
                f"example {response.id}: template alone exceeds the context cap {context_cap}"
            )
        ids, dropped = scorefeed.score_prompt_ids(
            tokenizer, item, response.text, max_response_tokens=response_len - overflow
        )
        log.warning(
            "example %s: dropped %d response tokens to fit context cap %d",
            response.id,
            dropped,
            context_cap,
        )
    seq = ids + [score_id]
    mask = [False] * (len(seq) - 2) + [True]
    return Example(
        input_ids=seq[:-1], target_ids=seq[1:], loss_mask=mask, dropped_tokens=dropped
    )


def set_model_lr(model_family_tag: str, config: TrainConfig) -> float:
    """Family-specific learning rate: the gemma-like family trains at 1e-4."""
    known = {"default", "mistral-like", "llama-like", "phi-like"}
    if model_family_tag == "gemma-like":
        return 1e-4
    if model_family_tag not in known:
        warnings.warn(
            f"unknown model family tag {model_family_tag!r}; using the configured rate",
            stacklevel=2,
        )
    return config.learning_rate


def _dev_qwk(
    model: DecoderModel,
    tokenizer: Tokenizer,
    item: ItemSpec,
    dev: Sequence[ScoredResponse],
) -> float:
    rows = scorefeed.batch_score(model, tokenizer, item, dev)
    preds = [row.result.predicted for row in rows if row.result is not None]
    gold = [r.resolved for r, row in zip(dev, rows) if row.result is not None]
    if not preds:
        return -1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return qwk(
            scorefeed.clamp_for_metric(preds, item), gold, item.min_score, item.max_score
        )


def train_item(
    model: DecoderModel,
    tokenizer: Tokenizer,
    item: ItemSpec,
    train: Sequence[ScoredResponse],
    dev: Sequence[ScoredResponse],
    config: TrainConfig,
    out_dir=None,
    model_family_tag: str = "default",
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Fine-tune adapters on one item and return the best-dev checkpoint.

    The model must arrive without adapters; they are attached here from
    the config so identical seeds rebuild identical checkpoints byte for
    byte. Only adapter parameters receive updates.
    """
    if not train or not dev:
        raise ValueError("train and dev splits must both be nonempty")
    if model.adapters():
        raise ValueError("model already carries adapters; train_item attaches its own")
    rng = np.random.default_rng(config.seed)
    model.attach_adapters(config.rank, config.alpha, rng)
    params = model.adapter_parameters()
    states = [Opt8State.for_parameter(p, quantized=config.opt8bit) for p in params]

    cap = min(config.context_cap, model.config.max_context)
    examples = [build_example(r, item, tokenizer, cap) for r in train]
    lr0 = set_model_lr(model_family_tag, config)
    total_steps = config.epochs * len(examples)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(
            json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        metrics_fh = (out_dir / "metrics.jsonl").open("w", encoding="utf-8")

    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    started = time.monotonic()
    step = 0
    lr = lr0
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(examples))
            losses = []
            for idx in order:
                ex = examples[idx]
                logits = model.forward(ex.input_ids)
                loss = nd.cross_entropy_masked(logits, ex.target_ids, ex.loss_mask)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, train[idx].id, f"loss is {value}")
                loss.backward()
                lr = lr0 * (1.0 - step / total_steps)
                for p, st in zip(params, states):
                    opt8_step(
                        p,
                        st,
                        lr=lr,
                        beta1=config.beta1,
                        beta2=config.beta2,
                        eps=config.eps,
                        weight_decay=config.weight_decay,
                    )
                    p.zero_grad()
                step += 1
                losses.append(value)
            dev_score = _dev_qwk(model, tokenizer, item, dev)
            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                dev_qwk=dev_score,
                lr=lr,
                wall_seconds=time.monotonic() - started,
            )
            history.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record.__dict__, sort_keys=True) + "\n")
                metrics_fh.flush()
            if best is None or dev_score > best.dev_qwk:
                best = Checkpoint(
                    adapter_bytes=adapters_to_bytes(model.adapters()),
                    epoch=epoch,
                    dev_qwk=dev_score,
                    config_fingerprint=config.fingerprint(),
                )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    assert best is not None
    if out_dir is not None:
        (out_dir / "checkpoint_best.lora").write_bytes(best.adapter_bytes)
        (out_dir / "checkpoint_best.json").write_text(
            json.dumps(
                {
                    "epoch": best.epoch,
                    "dev_qwk": best.dev_qwk,
                    "config_fingerprint": best.config_fingerprint,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
        total = time.monotonic() - started
        lines = [f"wall_seconds: {total:.3f}"]
        if config.baseline_seconds:
            lines.append(f"baseline_seconds: {config.baseline_seconds:.3f}")
            lines.append(f"relative_time: {total / config.baseline_seconds:.2f}x")
        (out_dir / "timing.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return best, history
