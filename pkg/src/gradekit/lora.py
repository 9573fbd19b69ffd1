"""Low-rank adapters over frozen, optionally quantized, base matrices.

An adapter adds ``(alpha/r) * B @ A`` to a frozen weight. B starts at
zero so a freshly adapted layer computes exactly what the base layer
did; only A and B ever receive gradients. Adapters can be merged into
a full-precision base for plain inference and unmerged to recover it.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import ndcore as nd
from .ndcore import Parameter, Tensor
from .quant import QuantizedMatrix, dequantize

__all__ = [
    "LoraAdapter",
    "AdaptedLinear",
    "MergeStateError",
    "adapted_forward",
    "merge",
    "unmerge",
    "count_trainable",
    "save_adapters",
    "load_adapters",
    "adapters_to_bytes",
    "adapters_from_bytes",
]

ADAPTER_INIT_STD = 0.02


class MergeStateError(RuntimeError):
    """Merge or unmerge was requested in a state that does not allow it."""


@dataclass
class LoraAdapter:
    """The trainable (A, B) pair for one adapted matrix.

    A is Gaussian-initialized and B is zero, so the update B @ A starts
    at exactly zero. The effective delta is scaled by alpha / r.
    """

    a: Parameter
    b: Parameter
    rank: int
    alpha: float

    @classmethod
    def create(cls, d: int, k: int, rank: int, alpha: float, rng: np.random.Generator) -> "LoraAdapter":
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        if 2 * rank >= min(d, k):
            warnings.warn(
                f"rank {rank} is not small relative to min(d, k) = {min(d, k)}; "
                "low-rank adaptation expects r << min(d, k)",
                stacklevel=2,
            )
        a = Parameter(rng.normal(0.0, ADAPTER_INIT_STD, size=(rank, k)).astype(np.float32))
        b = Parameter(np.zeros((d, rank), dtype=np.float32))
        return cls(a=a, b=b, rank=rank, alpha=float(alpha))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_count(self) -> int:
        d = self.b.shape[0]
        k = self.a.shape[1]
        return self.rank * (k + d)

    def delta(self) -> np.ndarray:
        """The dense update scaling * B @ A."""
        return np.float32(self.scaling) * (self.b.data @ self.a.data)

    def parameters(self) -> list[Parameter]:
        return [self.a, self.b]


class AdaptedLinear:
    """A frozen d x k linear map plus an optional low-rank adapter.

    The base weight may be a dense tensor or an NF4-quantized matrix;
    quantized bases are dequantized for each use (the reconstruction is
    a pure function of the frozen codes, so the dense form is memoized).
    """

    def __init__(
        self,
        base: Tensor | QuantizedMatrix,
        bias: Parameter | None = None,
        adapter: LoraAdapter | None = None,
    ):
        if isinstance(base, Tensor):
            if base.data.ndim != 2:
                raise nd.ShapeError(f"base must be 2-D, got {base.shape}")
            base.requires_grad = False
        self.base = base
        d, k = self.shape
        if bias is None:
            bias = Parameter(np.zeros(d, dtype=np.float32), trainable=False)
        if bias.shape != (d,):
            raise nd.ShapeError(f"bias shape {bias.shape} does not match output dim {d}")
        bias.requires_grad = False
        bias.trainable = False
        self.bias = bias
        self.adapter = adapter
        self.merged = False
        self._dense_cache: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        if isinstance(self.base, QuantizedMatrix):
            return (self.base.rows, self.base.cols)
        return self.base.shape  # type: ignore[return-value]

    @property
    def quantized(self) -> bool:
        return isinstance(self.base, QuantizedMatrix)

    def base_dense(self) -> np.ndarray:
        if isinstance(self.base, QuantizedMatrix):
            if self._dense_cache is None:
                self._dense_cache = dequantize(self.base).data
            return self._dense_cache
        return self.base.data

    def attach_adapter(self, rank: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
        d, k = self.shape
        self.adapter = LoraAdapter.create(d, k, rank, alpha, rng)
        return self.adapter

    # -- training path (autodiff graph) --------------------------------

    def forward2d(self, x: Tensor) -> Tensor:
        d, k = self.shape
        if x.data.ndim != 2 or x.shape[1] != k:
            raise nd.ShapeError(f"input {x.shape} does not match weight {d}x{k}")
        w = Tensor(self.base_dense())
        y = nd.add_bias(nd.matmul(x, nd.transpose(w)), self.bias)
        if self.adapter is not None and not self.merged:
            ad = self.adapter
            low = nd.matmul(x, nd.transpose(ad.a))
            y = nd.add(y, nd.scale(nd.matmul(low, nd.transpose(ad.b)), ad.scaling))
        return y

    # -- inference path (plain arrays) ----------------------------------

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.base_dense().T + self.bias.data
        if self.adapter is not None and not self.merged:
            ad = self.adapter
            y = y + np.float32(ad.scaling) * ((x @ ad.a.data.T) @ ad.b.data.T)
        return y

    # -- merge / unmerge -------------------------------------------------

    def merge(self) -> "AdaptedLinear":
        if self.adapter is None:
            raise MergeStateError("no adapter to merge")
        if self.merged:
            raise MergeStateError("layer is already merged")
        if self.quantized:
            raise MergeStateError("quantized base must be dequantized before merging")
        self.base = Tensor(self.base.data + self.adapter.delta())
        self.merged = True
        return self

    def unmerge(self) -> "AdaptedLinear":
        if not self.merged:
            raise MergeStateError("layer is not merged")
        self.base = Tensor(self.base.data - self.adapter.delta())
        self.merged = False
        return self

    def dequantized(self) -> "AdaptedLinear":
        """A copy of this layer with the base materialized in full precision."""
        out = AdaptedLinear(Tensor(self.base_dense().copy()), self.bias, self.adapter)
        out.merged = self.merged
        return out


def adapted_forward(layer: AdaptedLinear, x: Tensor) -> Tensor:
    """W0 x + b + scaling * B(Ax); accepts a length-k vector or [T, k] rows."""
    if x.data.ndim == 1:
        row = Tensor(x.data.reshape(1, -1), requires_grad=x.requires_grad)
        if x.requires_grad:
            row._parents = (x,)
            row._grad_fns = (lambda g: g.reshape(x.data.shape),)
        out2 = layer.forward2d(row)
        out = Tensor(out2.data.reshape(-1), requires_grad=out2.requires_grad)
        if out.requires_grad:
            out._parents = (out2,)
            out._grad_fns = (lambda g: g.reshape(out2.data.shape),)
        return out
    return layer.forward2d(x)


def merge(layer: AdaptedLinear) -> AdaptedLinear:
    return layer.merge()


def unmerge(layer: AdaptedLinear) -> AdaptedLinear:
    return layer.unmerge()


def count_trainable(layer_dims: Iterable[tuple[int, int]], rank: int) -> int:
    """Sum of r * (k + d) over adapted layers, in exact integer arithmetic."""
    return sum(int(rank) * (int(d) + int(k)) for d, k in layer_dims)


# ---------------------------------------------------------------------------
# adapter-only checkpoint serialization
# ---------------------------------------------------------------------------

_MAGIC = b"GKLORA1\n"
_VERSION = 1


def adapters_to_bytes(adapters: dict[str, LoraAdapter]) -> bytes:
    """Little-endian adapter checkpoint: only the LoRA weights are stored."""
    if not adapters:
        raise ValueError("no adapters to serialize")
    ranks = {a.rank for a in adapters.values()}
    alphas = {a.alpha for a in adapters.values()}
    if len(ranks) != 1 or len(alphas) != 1:
        raise ValueError("all adapters in one checkpoint must share rank and alpha")
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<IIfI", _VERSION, ranks.pop(), alphas.pop(), len(adapters))
    for name in sorted(adapters):
        ad = adapters[name]
        d = ad.b.shape[0]
        k = ad.a.shape[1]
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<II", d, k)
        out += ad.a.data.astype("<f4").tobytes()
        out += ad.b.data.astype("<f4").tobytes()
    return bytes(out)


def adapters_from_bytes(blob: bytes) -> dict[str, LoraAdapter]:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not an adapter checkpoint (bad magic)")
    off = len(_MAGIC)
    version, rank, alpha, n = struct.unpack_from("<IIfI", blob, off)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IIfI")
    adapters: dict[str, LoraAdapter] = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        d, k = struct.unpack_from("<II", blob, off)
        off += 8
        a = np.frombuffer(blob, dtype="<f4", count=rank * k, offset=off).reshape(rank, k)
        off += 4 * rank * k
        b = np.frombuffer(blob, dtype="<f4", count=d * rank, offset=off).reshape(d, rank)
        off += 4 * d * rank
        adapters[name] = LoraAdapter(
            a=Parameter(a.copy()), b=Parameter(b.copy()), rank=rank, alpha=float(alpha)
        )
    return adapters


def save_adapters(path, adapters: dict[str, LoraAdapter]) -> None:
    with open(path, "wb") as fh:
        fh.write(adapters_to_bytes(adapters))


def load_adapters(path) -> dict[str, LoraAdapter]:
    with open(path, "rb") as fh:
        return adapters_from_bytes(fh.read())
