"""Toy decoder-only transformer, tokenizer, and chat-turn rendering.

The model is pre-norm RMS with rotary attention and gated feed-forward
blocks; every projection matrix is an ``AdaptedLinear`` so low-rank
adapters can attach to all of them. Training uses the autodiff graph;
generation uses an incremental numpy path with cached attention state
that computes the same function.

The tokenizer is word-level over its build corpus with single-character
fallback, plus dedicated single tokens for every integer score 0..60 so
a one-token generation step can express any score.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import ndcore as nd
from .lora import AdaptedLinear, LoraAdapter
from .ndcore import Parameter, Tensor
from .quant import QuantizedMatrix, quantize_nf4

__all__ = [
    "ModelConfig",
    "Tokenizer",
    "ChatPrompt",
    "Turn",
    "DecoderModel",
    "ContextOverflowError",
    "render_chat",
    "generate",
    "build_tokenizer",
    "save_model",
    "load_model",
]


class ContextOverflowError(ValueError):
    """A token sequence does not fit in the model context."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden_size: int = 128
    intermediate_size: int = 448
    n_heads: int = 4
    vocab_size: int = 2048
    max_context: int = 2048
    rope_base: float = 10000.0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("n_layers", "hidden_size", "intermediate_size", "n_heads", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_context < 1:
            raise ValueError("max_context must be >= 1")
        if self.hidden_size % self.n_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "hidden_size": self.hidden_size,
            "intermediate_size": self.intermediate_size,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_context": self.max_context,
            "rope_base": self.rope_base,
            "init_std": self.init_std,
        }


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

MAX_SCORE_TOKEN = 60

BOS = "<|bos|>"
EOS = "<|eos|>"
USER = "<|user|>"
ASSISTANT = "<|assistant|>"
END = "<|end|>"
UNK = "<|unk|>"
_SPECIALS = (BOS, EOS, USER, ASSISTANT, END, UNK)

# letter runs, digit runs, whitespace runs, then any single leftover char
_PIECE_RE = re.compile(r"[^\W\d_]+|\d+|\s+|.", re.DOTALL)


def split_pieces(text: str) -> list[str]:
    return _PIECE_RE.findall(text)


class Tokenizer:
    """Lossless word-level tokenizer with integer score tokens.

    ``decode(encode(s)) == s`` for any string whose pieces or characters
    were in the build corpus; unknown characters map to a visible
    unknown marker. Special role markers can never be produced by
    encoding plain text, which keeps chat rendering injective.
    """

    def __init__(self, tokens: Sequence[str]):
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate token strings in vocabulary")
        for s in _SPECIALS:
            if s not in self._ids:
                raise ValueError(f"vocabulary is missing special token {s}")
        for n in range(MAX_SCORE_TOKEN + 1):
            if str(n) not in self._ids:
                raise ValueError(f"vocabulary is missing score token {n}")
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.user_id = self._ids[USER]
        self.assistant_id = self._ids[ASSISTANT]
        self.end_id = self._ids[END]
        self.unk_id = self._ids[UNK]

    @property
    def vocab_size(self) -> int:
        return len(self._tokens)

    @property
    def stop_ids(self) -> frozenset[int]:
        return frozenset((self.eos_id, self.end_id))

    def score_token_id(self, score: int) -> int:
        if not 0 <= score <= MAX_SCORE_TOKEN:
            raise ValueError(f"score {score} outside the tokenized range 0..{MAX_SCORE_TOKEN}")
        return self._ids[str(score)]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in split_pieces(text):
            pid = self._ids.get(piece)
            if pid is not None:
                ids.append(pid)
                continue
            for ch in piece:
                ids.append(self._ids.get(ch, self.unk_id))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self._tokens):
                raise ValueError(f"token id {i} out of range")
            out.append(self._tokens[i])
        return "".join(out)

    def token_string(self, token_id: int) -> str:
        return self._tokens[token_id]

    def to_json(self) -> str:
        return json.dumps(
            {"format_version": 1, "tokens": self._tokens},
            ensure_ascii=False,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        payload = json.loads(text)
        if payload.get("format_version") != 1:
            raise ValueError("unsupported tokenizer format version")
        return cls(payload["tokens"])


def build_tokenizer(corpus: Iterable[str]) -> Tokenizer:
    """Build a vocabulary over every piece and character of the corpus.

    Include every string the model will ever see verbatim (templates,
    rubrics, responses); anything else falls back to characters.
    """
    pieces: set[str] = set()
    chars: set[str] = set()
    for text in corpus:
        pieces.update(split_pieces(text))
        chars.update(text)
    reserved = set(_SPECIALS) | {str(n) for n in range(MAX_SCORE_TOKEN + 1)}
    extra = sorted((pieces | chars) - reserved)
    tokens = list(_SPECIALS) + [str(n) for n in range(MAX_SCORE_TOKEN + 1)] + extra
    return Tokenizer(tokens)


# ---------------------------------------------------------------------------
# chat prompt rendering
# ---------------------------------------------------------------------------

ROLES = ("user", "assistant")


@dataclass(frozen=True)
class Turn:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.text:
            raise ValueError("turn text must be nonempty")


@dataclass(frozen=True)
class ChatPrompt:
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns:
            raise ValueError("a chat prompt needs at least one turn")

    @classmethod
    def of(cls, *turns: tuple[str, str]) -> "ChatPrompt":
        return cls(tuple(Turn(role, text) for role, text in turns))


def render_chat(
    tokenizer: Tokenizer, prompt: ChatPrompt, add_generation_prefix: bool = False
) -> list[int]:
    """Canonical role-marked token stream: <|role|>text<|end|> per turn.

    With ``add_generation_prefix`` the stream ends with the assistant
    marker so the next generated token continues an assistant turn.
    Role markers are single ids not reachable from text, so distinct
    turn lists always render to distinct streams.
    """
    ids: list[int] = []
    for turn in prompt.turns:
        ids.append(tokenizer.user_id if turn.role == "user" else tokenizer.assistant_id)
        ids.extend(tokenizer.encode(turn.text))
        ids.append(tokenizer.end_id)
    if add_generation_prefix:
        ids.append(tokenizer.assistant_id)
    return ids


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _frozen_linear(rng: np.random.Generator, d: int, k: int, std: float) -> AdaptedLinear:
    return AdaptedLinear(Tensor(rng.normal(0.0, std, size=(d, k)).astype(np.float32)))


@dataclass
class Block:
    attn_norm: Parameter
    q: AdaptedLinear
    k: AdaptedLinear
    v: AdaptedLinear
    o: AdaptedLinear
    ffn_norm: Parameter
    gate: AdaptedLinear
    up: AdaptedLinear
    down: AdaptedLinear

    def projections(self) -> dict[str, AdaptedLinear]:
        return {
            "attn.q": self.q,
            "attn.k": self.k,
            "attn.v": self.v,
            "attn.o": self.o,
            "ffn.gate": self.gate,
            "ffn.up": self.up,
            "ffn.down": self.down,
        }


class DecoderModel:
    """Causal transformer over token ids; returns next-token logits."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        h, inter, v = config.hidden_size, config.intermediate_size, config.vocab_size
        std = config.init_std
        self.wte = Parameter(rng.normal(0.0, std, size=(v, h)).astype(np.float32), trainable=False)
        self.blocks: list[Block] = []
        for _ in range(config.n_layers):
            self.blocks.append(
                Block(
                    attn_norm=Parameter(np.ones(h, dtype=np.float32), trainable=False),
                    q=_frozen_linear(rng, h, h, std),
                    k=_frozen_linear(rng, h, h, std),
                    v=_frozen_linear(rng, h, h, std),
                    o=_frozen_linear(rng, h, h, std),
                    ffn_norm=Parameter(np.ones(h, dtype=np.float32), trainable=False),
                    gate=_frozen_linear(rng, inter, h, std),
                    up=_frozen_linear(rng, inter, h, std),
                    down=_frozen_linear(rng, h, inter, std),
                )
            )
        self.final_norm = Parameter(np.ones(h, dtype=np.float32), trainable=False)
        self.lm_head = _frozen_linear(rng, v, h, std)

    # -- adapters ---------------------------------------------------------

    def adapted_layers(self) -> dict[str, AdaptedLinear]:
        out: dict[str, AdaptedLinear] = {}
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.projections().items():
                out[f"layers.{i}.{name}"] = layer
        return out

    def attach_adapters(
        self, rank: int, alpha: float, rng: np.random.Generator
    ) -> dict[str, LoraAdapter]:
        adapters = {}
        for name, layer in self.adapted_layers().items():
            adapters[name] = layer.attach_adapter(rank, alpha, rng)
        return adapters

    def adapters(self) -> dict[str, LoraAdapter]:
        return {
            name: layer.adapter
            for name, layer in self.adapted_layers().items()
            if layer.adapter is not None
        }

    def set_adapters(self, adapters: dict[str, LoraAdapter]) -> None:
        layers = self.adapted_layers()
        for name, adapter in adapters.items():
            if name not in layers:
                raise KeyError(f"no adapted layer named {name}")
            layers[name].adapter = adapter

    def adapter_parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for adapter in self.adapters().values():
            params.extend(adapter.parameters())
        return params

    def quantize_base(self, block_size: int = 64) -> None:
        """Convert every projection's frozen base to block-wise NF4 storage."""
        for layer in self.adapted_layers().values():
            if not layer.quantized:
                layer.base = quantize_nf4(layer.base.data, block_size=block_size)
                layer._dense_cache = None

    def base_fingerprint(self) -> str:
        """Hash of every frozen weight; adapters are excluded."""
        digest = hashlib.sha256()
        digest.update(self.wte.data.tobytes())
        for blk in self.blocks:
            digest.update(blk.attn_norm.data.tobytes())
            digest.update(blk.ffn_norm.data.tobytes())
            for layer in blk.projections().values():
                if isinstance(layer.base, QuantizedMatrix):
                    digest.update(layer.base.codes.tobytes())
                    digest.update(layer.base.absmax_q.tobytes())
                    digest.update(layer.base.absmax_meta.tobytes())
                else:
                    digest.update(layer.base.data.tobytes())
        digest.update(self.final_norm.data.tobytes())
        digest.update(self.lm_head.base_dense().tobytes())
        return digest.hexdigest()

    # -- training-path forward (autodiff graph) ----------------------------

    def forward(self, ids: Sequence[int]) -> Tensor:
        """Logits [T, V]; position t depends only on tokens at positions <= t."""
        ids = list(ids)
        if not ids:
            raise ValueError("forward requires at least one token")
        if len(ids) > self.config.max_context:
            raise ContextOverflowError(
                f"sequence length {len(ids)} exceeds max_context {self.config.max_context}"
            )
        cfg = self.config
        hd = cfg.head_dim
        inv_sqrt = 1.0 / np.sqrt(hd)
        x = nd.embedding(self.wte, ids)
        for blk in self.blocks:
            a = nd.rmsnorm_rows(x, blk.attn_norm)
            q = blk.q.forward2d(a)
            k = blk.k.forward2d(a)
            v = blk.v.forward2d(a)
            heads = []
            for hidx in range(cfg.n_heads):
                lo, hi = hidx * hd, (hidx + 1) * hd
                qh = nd.rope_rotate(nd.slice_cols(q, lo, hi), base=cfg.rope_base)
                kh = nd.rope_rotate(nd.slice_cols(k, lo, hi), base=cfg.rope_base)
                scores = nd.scale(nd.matmul(qh, nd.transpose(kh)), inv_sqrt)
                weights = nd.causal_softmax_rows(scores)
                heads.append(nd.matmul(weights, nd.slice_cols(v, lo, hi)))
            x = nd.add(x, blk.o.forward2d(nd.concat_cols(heads)))
            f = nd.rmsnorm_rows(x, blk.ffn_norm)
            gated = nd.mul(nd.silu(blk.gate.forward2d(f)), blk.up.forward2d(f))
            x = nd.add(x, blk.down.forward2d(gated))
        return self.lm_head.forward2d(nd.rmsnorm_rows(x, self.final_norm))

    # -- inference path (plain arrays, cached attention state) -------------

    def start_cache(self) -> list[dict[str, np.ndarray]]:
        h = self.config.hidden_size
        empty = np.zeros((0, h), dtype=np.float32)
        return [{"k": empty, "v": empty} for _ in self.blocks]

    def forward_np(
        self, ids: Sequence[int], cache: list[dict[str, np.ndarray]] | None = None
    ) -> np.ndarray:
        """Same function as :meth:`forward`, but grad-free and incremental.

        With a cache, only the new ids are processed and attention reads
        the cached keys/values of everything that came before.
        """
        cfg = self.config
        hd = cfg.head_dim
        inv_sqrt = np.float32(1.0 / np.sqrt(hd))
        ids = list(ids)
        pos0 = 0 if cache is None else cache[0]["k"].shape[0]
        if pos0 + len(ids) > cfg.max_context:
            raise ContextOverflowError(
                f"sequence length {pos0 + len(ids)} exceeds max_context {cfg.max_context}"
            )
        t_new = len(ids)
        x = self.wte.data[np.asarray(ids, dtype=np.int64)]
        for li, blk in enumerate(self.blocks):
            a = _rmsnorm_np(x, blk.attn_norm.data)
            q = blk.q.apply_np(a)
            k = blk.k.apply_np(a)
            v = blk.v.apply_np(a)
            q = _rotate_heads(q, cfg.n_heads, pos0, cfg.rope_base)
            k = _rotate_heads(k, cfg.n_heads, pos0, cfg.rope_base)
            if cache is not None:
                k = np.concatenate([cache[li]["k"], k], axis=0)
                v = np.concatenate([cache[li]["v"], v], axis=0)
                cache[li]["k"] = k
                cache[li]["v"] = v
            t_total = k.shape[0]
            # row i (absolute position pos0 + i) may attend to columns <= pos0 + i
            mask = np.arange(t_total)[None, :] > (pos0 + np.arange(t_new))[:, None]
            heads = []
            for hidx in range(cfg.n_heads):
                lo, hi = hidx * hd, (hidx + 1) * hd
                scores = (q[:, lo:hi] @ k[:, lo:hi].T) * inv_sqrt
                scores = np.where(mask, np.float32(-np.inf), scores)
                weights = _softmax_np(scores)
                heads.append(weights @ v[:, lo:hi])
            x = x + blk.o.apply_np(np.concatenate(heads, axis=1))
            f = _rmsnorm_np(x, blk.ffn_norm.data)
            gate = blk.gate.apply_np(f)
            gated = (gate / (1.0 + np.exp(-gate))) * blk.up.apply_np(f)
            x = x + blk.down.apply_np(gated)
        return self.lm_head.apply_np(_rmsnorm_np(x, self.final_norm.data))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _rmsnorm_np(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + np.float32(nd.RMSNORM_EPS))
    return x * inv * gain


def _rotate_heads(x: np.ndarray, n_heads: int, pos0: int, base: float) -> np.ndarray:
    hd = x.shape[1] // n_heads
    out = np.empty_like(x)
    for hidx in range(n_heads):
        lo, hi = hidx * hd, (hidx + 1) * hd
        out[:, lo:hi] = nd.rope_rotate_array(x[:, lo:hi], pos_offset=pos0, base=base)
    return out


def generate(
    model: DecoderModel,
    prompt_ids: Sequence[int],
    max_new_tokens: int,
    mode: str = "greedy",
    stop_ids: Iterable[int] = (),
) -> list[int]:
    """Greedy continuation of the prompt, at most ``max_new_tokens`` long.

    Emits the stop token (normally end-of-turn) as its final token when
    one is produced; stops early if the context window fills up.
    """
    if mode != "greedy":
        raise ValueError(f"unsupported generation mode {mode!r}")
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    prompt_ids = list(prompt_ids)
    if not prompt_ids:
        raise ValueError("prompt must be nonempty")
    if len(prompt_ids) >= model.config.max_context:
        raise ContextOverflowError(
            f"prompt length {len(prompt_ids)} leaves no room in context "
            f"{model.config.max_context}"
        )
    stops = frozenset(stop_ids)
    cache = model.start_cache()
    logits = model.forward_np(prompt_ids, cache)
    produced: list[int] = []
    total = len(prompt_ids)
    while True:
        next_id = int(np.argmax(logits[-1]))
        produced.append(next_id)
        total += 1
        if next_id in stops or len(produced) >= max_new_tokens or total >= model.config.max_context:
            return produced
        logits = model.forward_np([next_id], cache)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"GKMODEL\n"
_MODEL_VERSION = 1


def _named_arrays(model: DecoderModel) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = [("wte", model.wte.data)]
    for i, blk in enumerate(model.blocks):
        out.append((f"layers.{i}.attn_norm", blk.attn_norm.data))
        for name, layer in blk.projections().items():
            if layer.quantized:
                raise ValueError("cannot serialize a quantized model; save the dense base")
            out.append((f"layers.{i}.{name}.weight", layer.base.data))
            out.append((f"layers.{i}.{name}.bias", layer.bias.data))
        out.append((f"layers.{i}.ffn_norm", blk.ffn_norm.data))
    out.append(("final_norm", model.final_norm.data))
    out.append(("lm_head.weight", model.lm_head.base.data))
    out.append(("lm_head.bias", model.lm_head.bias.data))
    return out


def save_model(path, model: DecoderModel) -> None:
    """Versioned little-endian dump of the config and every dense weight."""
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<II", _MODEL_VERSION, len(config_blob)))
        fh.write(config_blob)
        arrays = _named_arrays(model)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_model(path) -> DecoderModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MODEL_MAGIC)] != _MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    off = len(_MODEL_MAGIC)
    version, cfg_len = struct.unpack_from("<II", blob, off)
    if version != _MODEL_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    off += 8
    config = ModelConfig(**json.loads(blob[off : off + cfg_len].decode("utf-8")))
    off += cfg_len
    (n_arrays,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        )
        off += 4 * count
    model = DecoderModel(config, np.random.default_rng(0))
    model.wte = Parameter(arrays["wte"], trainable=False)
    for i, blk in enumerate(model.blocks):
        blk.attn_norm = Parameter(arrays[f"layers.{i}.attn_norm"], trainable=False)
        blk.ffn_norm = Parameter(arrays[f"layers.{i}.ffn_norm"], trainable=False)
        for name, layer in blk.projections().items():
            layer.base = Tensor(arrays[f"layers.{i}.{name}.weight"])
            layer.bias = Parameter(arrays[f"layers.{i}.{name}.bias"], trainable=False)
            layer._dense_cache = None
    model.final_norm = Parameter(arrays["final_norm"], trainable=False)
    model.lm_head.base = Tensor(arrays["lm_head.weight"])
    model.lm_head.bias = Parameter(arrays["lm_head.bias"], trainable=False)
    model.lm_head._dense_cache = None
    return model
