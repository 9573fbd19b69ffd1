"""Block-wise 4-bit NormalFloat storage for frozen weight matrices.

Weights are grouped into fixed-size blocks, scaled by the block's
absolute maximum, and rounded to a 16-level codebook derived from
normal-distribution quantiles. The per-block scale constants are
themselves stored as 8-bit codes (double quantization). The module
also provides 8-bit optimizer-moment storage and an exact-integer
memory accountant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .ndcore import Parameter, Tensor

__all__ = [
    "NF4Codebook",
    "QuantizedMatrix",
    "Opt8State",
    "MemoryReport",
    "DecodeError",
    "NonFiniteGradientError",
    "nf4_codebook",
    "quantize_nf4",
    "dequantize",
    "opt8_step",
    "memory_report",
    "codebook_lines",
    "DEFAULT_BLOCK_SIZE",
    "DEFAULT_GROUP_SIZE",
]

DEFAULT_BLOCK_SIZE = 64
# block scale constants are 8-bit quantized in groups of this many blocks
DEFAULT_GROUP_SIZE = 256

# Tail probability of the extreme codebook quantile. Quantiles are taken at
# equally spaced probabilities up to this point (the exact endpoint of the
# normal distribution sits at infinity), then rescaled so the extreme levels
# land exactly on -1 and +1.
_QUANTILE_EDGE = 0.9677083


class DecodeError(ValueError):
    """A quantized payload holds an out-of-range code."""


class NonFiniteGradientError(ArithmeticError):
    """An optimizer step was rejected because the gradient is not finite."""


@dataclass(frozen=True)
class NF4Codebook:
    """The 16 ascending quantization levels, spanning exactly [-1, 1].

    The positive side carries 8 levels and the negative side 7, with 0
    inserted exactly; the asymmetry buys an exact zero, matching the
    usual 4-bit NormalFloat layout.
    """

    levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.float32)
        if lv.shape != (16,):
            raise ValueError(f"codebook must hold exactly 16 levels, got {lv.shape}")
        if lv[0] != -1.0 or lv[15] != 1.0:
            raise ValueError("extreme levels must be exactly -1 and +1")
        if not np.any(lv == 0.0):
            raise ValueError("0 must be exactly representable")
        if not np.all(np.diff(lv) > 0):
            raise ValueError("levels must be strictly increasing")
        object.__setattr__(self, "levels", lv)

    @property
    def zero_code(self) -> int:
        return int(np.flatnonzero(self.levels == 0.0)[0])

    def max_half_gap(self) -> float:
        """Largest half-distance between adjacent levels, the worst-case
        round-trip error for a unit-scale element."""
        return float(np.diff(self.levels.astype(np.float64)).max() / 2.0)


def _build_codebook() -> NF4Codebook:
    ppf = NormalDist().inv_cdf
    pos = [ppf(p) for p in np.linspace(0.5, _QUANTILE_EDGE, 9)[1:]]
    neg = [-ppf(p) for p in np.linspace(0.5, _QUANTILE_EDGE, 8)[1:]]
    raw = np.array(sorted(neg + [0.0] + pos), dtype=np.float64)
    levels = (raw / raw.max()).astype(np.float32)
    return NF4Codebook(levels=levels)


_CODEBOOK = _build_codebook()


def nf4_codebook() -> NF4Codebook:
    return _CODEBOOK


def codebook_lines() -> list[str]:
    """The golden-file representation: one decimal level per line."""
    return [f"{float(v):.8f}" for v in _CODEBOOK.levels]


@dataclass
class QuantizedMatrix:
    """4-bit codes plus double-quantized per-block scale constants.

    ``codes`` holds one level index per element (row-major); ``absmax_q``
    holds one 8-bit code per block; ``absmax_meta`` holds a (offset, step)
    float32 pair per group of block constants.
    """

    rows: int
    cols: int
    block_size: int
    codes: np.ndarray  # uint8, one 4-bit index per element
    absmax_q: np.ndarray  # uint8, one per block
    absmax_meta: np.ndarray  # float32 [n_groups, 2]
    group_size: int = DEFAULT_GROUP_SIZE

    @property
    def n_blocks(self) -> int:
        return -(-self.rows * self.cols // self.block_size)

    def block_scales(self) -> np.ndarray:
        """Dequantized per-block scale constants."""
        groups = np.arange(self.n_blocks) // self.group_size
        meta = self.absmax_meta[groups]
        return (meta[:, 0] + self.absmax_q.astype(np.float32) * meta[:, 1]).astype(np.float32)


def _quantize_scales(scales: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    n = scales.size
    n_groups = -(-n // group_size)
    codes = np.zeros(n, dtype=np.uint8)
    meta = np.zeros((n_groups, 2), dtype=np.float32)
    for g in range(n_groups):
        chunk = scales[g * group_size : (g + 1) * group_size]
        lo = np.float32(chunk.min())
        rng = np.float32(chunk.max() - lo)
        step = np.float32(rng / np.float32(255.0)) if rng > 0 else np.float32(0.0)
        meta[g] = (lo, step)
        if step > 0:
            codes[g * group_size : (g + 1) * group_size] = np.clip(
                np.rint((chunk - lo) / step), 0, 255
            ).astype(np.uint8)
    return codes, meta


def _nearest_codes(normalized: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Nearest-level indices; exact ties break toward the level nearer zero."""
    x = np.clip(normalized, -1.0, 1.0)
    hi = np.searchsorted(levels, x, side="left").clip(1, 15)
    lo = hi - 1
    d_lo = x - levels[lo]
    d_hi = levels[hi] - x
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (np.abs(levels[hi]) < np.abs(levels[lo])))
    return np.where(pick_hi, hi, lo).astype(np.uint8)


def quantize_nf4(
    m: Tensor | np.ndarray,
    block_size: int = DEFAULT_BLOCK_SIZE,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> QuantizedMatrix:
    """Quantize a 2-D matrix to block-wise NF4 codes.

    Per block the scale is the absolute maximum, so the extreme element
    of every block maps to the +-1 level and zero elements map to the
    exact-zero level. An all-zero block codes every element to zero.
    """
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"quantize_nf4 expects a 2-D matrix, got shape {data.shape}")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if not np.all(np.isfinite(data)):
        raise ValueError("quantize_nf4 requires finite input")
    rows, cols = data.shape
    size = rows * cols
    n_blocks = -(-size // block_size) if size else 0
    flat = np.zeros(n_blocks * block_size, dtype=np.float32)
    flat[:size] = data.ravel()
    blocks = flat.reshape(n_blocks, block_size) if n_blocks else flat.reshape(0, block_size)
    scales = np.abs(blocks).max(axis=1) if n_blocks else np.zeros(0, dtype=np.float32)
    absmax_q, absmax_meta = _quantize_scales(scales, group_size)

    levels = _CODEBOOK.levels
    # zero-scale blocks code every element to the exact-zero level
    codes = np.full(flat.shape, _CODEBOOK.zero_code, dtype=np.uint8)
    nonzero = scales > 0
    if nonzero.any():
        normalized = blocks[nonzero] / scales[nonzero, None]
        codes.reshape(n_blocks, block_size)[nonzero] = _nearest_codes(normalized, levels)
    codes = codes[:size]
    return QuantizedMatrix(
        rows=rows,
        cols=cols,
        block_size=block_size,
        codes=codes,
        absmax_q=absmax_q,
        absmax_meta=absmax_meta,
        group_size=group_size,
    )


def dequantize(q: QuantizedMatrix) -> Tensor:
    """Reconstruct codebook[code] * block_scale for every element."""
    if q.codes.size and int(q.codes.max()) > 15:
        raise DecodeError(f"corrupted 4-bit code {int(q.codes.max())} (valid range 0..15)")
    size = q.rows * q.cols
    scales = q.block_scales()
    per_elem = np.repeat(scales, q.block_size)[:size]
    values = _CODEBOOK.levels[q.codes] * per_elem
    return Tensor(values.reshape(q.rows, q.cols))


# ---------------------------------------------------------------------------
# 8-bit optimizer state
# ---------------------------------------------------------------------------

OPT8_BLOCK = 256


@dataclass
class Opt8State:
    """Adam moment estimates stored block-wise in 8 bits per entry.

    The first moment uses signed codes with a per-block absmax scale;
    the second moment is nonnegative so its codes are unsigned. With
    ``quantized=False`` the moments stay in float32 and the step is
    exactly the full-precision reference update.
    """

    shape: tuple[int, ...]
    quantized: bool = True
    step_count: int = 0
    m8: np.ndarray = field(init=False)
    v8: np.ndarray = field(init=False)
    m_scale: np.ndarray = field(init=False)
    v_scale: np.ndarray = field(init=False)
    m_fp: np.ndarray | None = field(init=False, default=None)
    v_fp: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self):
        n = int(np.prod(self.shape)) if self.shape else 1
        n_blocks = -(-n // OPT8_BLOCK)
        self.m8 = np.zeros(n, dtype=np.int8)
        self.v8 = np.zeros(n, dtype=np.uint8)
        self.m_scale = np.zeros(n_blocks, dtype=np.float32)
        self.v_scale = np.zeros(n_blocks, dtype=np.float32)
        if not self.quantized:
            self.m_fp = np.zeros(n, dtype=np.float32)
            self.v_fp = np.zeros(n, dtype=np.float32)

    @classmethod
    def for_parameter(cls, p: Parameter, quantized: bool = True) -> "Opt8State":
        return cls(shape=tuple(p.shape), quantized=quantized)

    def _blocks(self, flat: np.ndarray) -> np.ndarray:
        n_blocks = self.m_scale.size
        padded = np.zeros(n_blocks * OPT8_BLOCK, dtype=np.float32)
        padded[: flat.size] = flat
        return padded.reshape(n_blocks, OPT8_BLOCK)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized (m, v); v is nonnegative by construction."""
        if not self.quantized:
            return self.m_fp.copy(), self.v_fp.copy()
        n = self.m8.size
        m = self.m8.astype(np.float32) * np.repeat(self.m_scale, OPT8_BLOCK)[:n]
        v = self.v8.astype(np.float32) * np.repeat(self.v_scale, OPT8_BLOCK)[:n]
        return m, v

    def store(self, m: np.ndarray, v: np.ndarray) -> None:
        if not self.quantized:
            self.m_fp = m.astype(np.float32)
            self.v_fp = v.astype(np.float32)
            return
        mb = self._blocks(m)
        vb = self._blocks(v)
        m_abs = np.abs(mb).max(axis=1)
        self.m_scale = (m_abs / np.float32(127.0)).astype(np.float32)
        with np.errstate(divide="ignore", invalid="ignore"):
            m_codes = np.where(
                m_abs[:, None] > 0, np.rint(mb / self.m_scale[:, None]), 0.0
            )
        self.m8 = np.clip(m_codes, -127, 127).astype(np.int8).ravel()[: m.size]
        v_max = vb.max(axis=1)
        self.v_scale = (v_max / np.float32(255.0)).astype(np.float32)
        with np.errstate(divide="ignore", invalid="ignore"):
            v_codes = np.where(v_max[:, None] > 0, np.rint(vb / self.v_scale[:, None]), 0.0)
        self.v8 = np.clip(v_codes, 0, 255).astype(np.uint8).ravel()[: v.size]


def opt8_step(
    p: Parameter,
    state: Opt8State,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place.

    Moments are dequantized, advanced with the current gradient, used for
    the parameter update, then requantized block-wise for storage.
    """
    if not p.trainable:
        raise ValueError("opt8_step requires a trainable parameter")
    if tuple(state.shape) != tuple(p.shape):
        raise ValueError(f"state shape {state.shape} does not match parameter {p.shape}")
    g = p.grad.ravel().astype(np.float32)
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteGradientError(
            f"non-finite gradient at flat index {bad} of parameter with shape {p.shape}"
        )
    state.step_count += 1
    t = state.step_count
    m, v = state.moments()
    # coefficients are formed in float64 first so e.g. (1 - 0.9) is an exact 0.1
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    m = b1 * m + np.float32(1.0 - beta1) * g
    v = b2 * v + np.float32(1.0 - beta2) * g * g
    m_hat = m / np.float32(1.0 - beta1**t)
    v_hat = v / np.float32(1.0 - beta2**t)
    update = m_hat / (np.sqrt(v_hat) + np.float32(eps))
    flat = p.data.ravel()
    flat -= np.float32(lr) * update
    if weight_decay:
        flat -= np.float32(lr) * np.float32(weight_decay) * flat
    state.store(m, v)


# ---------------------------------------------------------------------------
# memory accountant
# ---------------------------------------------------------------------------

FP32_BYTES = 4


@dataclass(frozen=True)
class MemoryReport:
    """Byte-exact storage breakdown for one parameterization."""

    mode: str
    param_count: int
    weight_bytes: int
    grad_bytes: int
    quant_constant_bytes: int = 0
    quant_meta_bytes: int = 0
    adapter_param_count: int = 0
    adapter_weight_bytes: int = 0
    adapter_grad_bytes: int = 0
    adapter_optimizer_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return (
            self.weight_bytes
            + self.grad_bytes
            + self.quant_constant_bytes
            + self.quant_meta_bytes
            + self.adapter_weight_bytes
            + self.adapter_grad_bytes
            + self.adapter_optimizer_bytes
        )

    def to_text(self) -> str:
        def line(name: str, b: int) -> str:
            return f"{name}: {b} bytes ({b / 1e9:.2f} GB)"

        parts = [
            f"mode: {self.mode}",
            f"parameters: {self.param_count}",
            line("weights", self.weight_bytes),
            line("gradients", self.grad_bytes),
        ]
        if self.mode != "fp32":
            parts.append(line("quant constants", self.quant_constant_bytes))
            parts.append(line("quant metadata", self.quant_meta_bytes))
        if self.adapter_param_count:
            parts.append(f"adapter parameters: {self.adapter_param_count}")
            parts.append(line("adapter weights", self.adapter_weight_bytes))
            parts.append(line("adapter gradients", self.adapter_grad_bytes))
            parts.append(line("adapter optimizer", self.adapter_optimizer_bytes))
        parts.append(line("total", self.total_bytes))
        return "\n".join(parts)


def memory_report(
    param_count: int,
    mode: str,
    block_size: int = DEFAULT_BLOCK_SIZE,
    group_size: int = DEFAULT_GROUP_SIZE,
    lora_rank: int | None = None,
    lora_dims: list[tuple[int, int]] | None = None,
    opt8bit: bool = False,
) -> MemoryReport:
    """Storage accounting in exact integer arithmetic.

    fp32 counts 4 bytes per parameter for weights and gradients. nf4
    counts half a byte per parameter plus one byte per block of scale
    constants (after double quantization) plus the second-level
    (offset, step) metadata per group. nf4+lora adds full-precision
    adapter parameters, their gradients, and their optimizer moments.
    """
    if param_count < 0:
        raise ValueError("param_count must be >= 0")
    param_count = int(param_count)
    if mode == "fp32":
        return MemoryReport(
            mode=mode,
            param_count=param_count,
            weight_bytes=FP32_BYTES * param_count,
            grad_bytes=FP32_BYTES * param_count,
        )
    if mode not in ("nf4", "nf4+lora"):
        raise ValueError(f"unknown mode {mode!r}")
    n_blocks = -(-param_count // block_size) if param_count else 0
    n_groups = -(-n_blocks // group_size) if n_blocks else 0
    report = {
        "mode": mode,
        "param_count": param_count,
        "weight_bytes": -(-param_count // 2),
        "grad_bytes": 0,
        "quant_constant_bytes": n_blocks,
        "quant_meta_bytes": n_groups * 2 * FP32_BYTES,
    }
    if mode == "nf4+lora":
        if lora_rank is None or not lora_dims:
            raise ValueError("nf4+lora mode requires lora_rank and lora_dims")
        n_adapter = sum(int(lora_rank) * (d + k) for d, k in lora_dims)
        if opt8bit:
            opt_blocks = -(-n_adapter // OPT8_BLOCK) if n_adapter else 0
            opt_bytes = 2 * n_adapter + 2 * opt_blocks * FP32_BYTES
        else:
            opt_bytes = 2 * FP32_BYTES * n_adapter
        report.update(
            adapter_param_count=n_adapter,
            adapter_weight_bytes=FP32_BYTES * n_adapter,
            adapter_grad_bytes=FP32_BYTES * n_adapter,
            adapter_optimizer_bytes=opt_bytes,
        )
    return MemoryReport(**report)
