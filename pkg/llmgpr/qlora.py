"""Affine b-bit quantization of frozen linear layers and low-rank adapters.

A frozen layer stores integer weights ``Wq`` in ``[0, 2^b - 1]`` with one step
``delta`` and offset ``w_min`` per tensor. Its effective weight under an
adapter is ``dequantize(Wq) + A @ B`` with ``A`` of shape ``(d_out, r)`` and
``B`` of shape ``(r, d_in)``.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from llmgpr.errors import DataError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_BITS = 4
DEFAULT_RANK = 16
DEFAULT_INIT_STD = 0.02
ADAPTER_NAMES = ("sequencing", "aggregation")


@dataclass(frozen=True)
class QLoRAConfig:
    """Quantization width, adapter rank, and adapter initialization."""

    r: int = DEFAULT_RANK
    b: int = DEFAULT_BITS
    init_std: float = DEFAULT_INIT_STD

    def __post_init__(self) -> None:
        if not 2 <= self.b <= 8:
            raise UsageError("b must be in [2, 8]")
        if self.r < 1:
            raise UsageError("r must be positive")
        if self.init_std <= 0:
            raise UsageError("init_std must be positive")

    @classmethod
    def from_section(cls, section: Any) -> "QLoRAConfig":
        """Build from a `[qlora]` config section."""
        return cls(
            r=section.get_int("r"),
            b=section.get_int("b"),
            init_std=section.get_float("init_std"),
        )


def _round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class QuantizedLinear(nn.Module):
    """A frozen linear layer with per-tensor affine quantized weights.

    The quantized weights, the step, the offset, and the (unquantized) bias
    are buffers: they are saved with the model but never trained.
    """

    def __init__(
        self, d_out: int, d_in: int, b: int = DEFAULT_BITS, bias: bool = True
    ) -> None:
        super().__init__()
        if not 2 <= b <= 8:
            raise UsageError("b must be in [2, 8]")
        self.b = b
        self.register_buffer("wq", torch.zeros(d_out, d_in, dtype=torch.uint8))
        self.register_buffer("delta", torch.tensor(1.0, dtype=torch.float64))
        self.register_buffer("w_min", torch.tensor(0.0, dtype=torch.float64))
        self.register_buffer("bias", torch.zeros(d_out) if bias else None)

    @property
    def shape(self) -> Tuple[int, int]:
        """Return (d_out, d_in)."""
        return (int(self.wq.shape[0]), int(self.wq.shape[1]))

    def weight(self, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
        """Return the dequantized weight."""
        w = dequantize(self)
        return w.to(dtype if dtype is not None else self._float_dtype())

    def _float_dtype(self) -> torch.dtype:
        return self.bias.dtype if self.bias is not None else torch.float32

    def forward(  # type: ignore
        self, x: torch.Tensor, adapter: Optional["Adapter"] = None
    ) -> torch.Tensor:
        y = F.linear(x, self.weight(x.dtype), self.bias)
        if adapter is not None:
            y = y + adapter(x)
        return y

    def extra_repr(self) -> str:
        return "d_out={}, d_in={}, b={}".format(*self.shape, self.b)


def quantize(
    w: torch.Tensor, b: int = DEFAULT_BITS, bias: Optional[torch.Tensor] = None
) -> QuantizedLinear:
    """Quantize a weight matrix to b bits.

    ``delta = (max - min) / (2^b - 1)`` and ``Wq = round((W - min) / delta)``
    with rounding half away from zero. A constant matrix gets ``delta = 1``
    and ``Wq = 0``.
    """
    w = torch.as_tensor(w).detach()
    if w.dim() == 1:
        w = w.unsqueeze(0)
    if w.dim() != 2:
        raise UsageError("quantize expects a matrix")
    if not torch.isfinite(w).all():
        raise DataError("non-finite entries in a weight matrix")
    q = QuantizedLinear(w.shape[0], w.shape[1], b, bias=bias is not None)
    w64 = w.to(torch.float64)
    w_min, w_max = w64.min(), w64.max()
    levels = 2 ** b - 1
    if w_max == w_min:
        delta = torch.tensor(1.0, dtype=torch.float64)
        wq = torch.zeros_like(w64)
    else:
        delta = (w_max - w_min) / levels
        wq = _round_half_away((w64 - w_min) / delta).clamp(0, levels)
    q.wq.copy_(wq.to(torch.uint8))
    q.delta.copy_(delta)
    q.w_min.copy_(w_min)
    if bias is not None:
        q.bias.copy_(bias.detach())
    return q


def dequantize(q: QuantizedLinear) -> torch.Tensor:
    """Return ``Wq * delta + w_min`` in double precision."""
    return q.wq.to(torch.float64) * q.delta + q.w_min


def quantize_linear(linear: nn.Linear, b: int = DEFAULT_BITS) -> QuantizedLinear:
    """Return the quantized, frozen replacement of a linear layer."""
    return quantize(linear.weight, b, linear.bias)


class Adapter(nn.Module):
    """Trainable low-rank pair for one linear layer.

    Applied to an input it returns ``dropout(x) @ (A @ B).T``.
    """

    def __init__(self, d_out: int, d_in: int, r: int, dropout: float = 0.0) -> None:
        super().__init__()
        if r < 1 or r > min(d_out, d_in):
            raise UsageError(
                "rank {} must be in [1, {}] for a {}x{} layer".format(
                    r, min(d_out, d_in), d_out, d_in
                )
            )
        self.r = r
        self.dropout = dropout
        self.A = nn.Parameter(torch.zeros(d_out, r))
        self.B = nn.Parameter(torch.zeros(r, d_in))

    @property
    def shape(self) -> Tuple[int, int]:
        """Return the shape (d_out, d_in) of the wrapped layer."""
        return (int(self.A.shape[0]), int(self.B.shape[1]))

    def delta_weight(self) -> torch.Tensor:
        """Return A @ B."""
        return self.A @ self.B

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # type: ignore
        x = F.dropout(x, self.dropout, self.training)
        return F.linear(F.linear(x, self.B), self.A)


def init_adapter(
    layer_shape: Tuple[int, int],
    r: int = DEFAULT_RANK,
    seed: int = 0,
    std: float = DEFAULT_INIT_STD,
    dropout: float = 0.0,
) -> Adapter:
    """Create an adapter with ``A ~ N(0, std^2)`` and ``B = 0``."""
    d_out, d_in = layer_shape
    adapter = Adapter(d_out, d_in, r, dropout)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        adapter.A.copy_(torch.randn(d_out, r, generator=gen) * std)
    return adapter


def adapted_weight(q: QuantizedLinear, adapter: Adapter) -> torch.Tensor:
    """Return ``dequantize(q) + A @ B``."""
    if q.shape != adapter.shape:
        raise UsageError(
            "adapter shape {} does not match layer {}".format(adapter.shape, q.shape)
        )
    ab = adapter.delta_weight()
    return dequantize(q).to(ab.dtype) + ab


def _key(path: str) -> str:
    return path.replace(".", "__")


class AdapterSet(nn.Module):
    """Adapters for every quantized linear layer of a model, keyed by layer path."""

    def __init__(self, name: str, adapters: Dict[str, Adapter]) -> None:
        super().__init__()
        if name not in ADAPTER_NAMES:
            raise UsageError("unknown adapter set name: " + name)
        self.name = name
        self.adapters = nn.ModuleDict({_key(k): v for k, v in sorted(adapters.items())})

    @classmethod
    def for_layers(
        cls,
        name: str,
        layers: Iterator[Tuple[str, QuantizedLinear]],
        config: QLoRAConfig,
        seed: int = 0,
        dropout: float = 0.0,
    ) -> "AdapterSet":
        """Create fresh adapters (B = 0) for the given layers."""
        adapters = {}  # type: Dict[str, Adapter]
        for i, (path, layer) in enumerate(layers):
            adapters[path] = init_adapter(
                layer.shape, config.r, seed * 1000 + i, config.init_std, dropout
            )
        if not adapters:
            raise UsageError("no quantized layers to adapt; freeze the model first")
        return cls(name, adapters)

    def get(self, path: str) -> Adapter:
        """Return the adapter of a layer path."""
        return self.adapters[_key(path)]  # type: ignore

    def paths(self) -> List[str]:
        """Return the layer paths covered."""
        return [k.replace("__", ".") for k in self.adapters.keys()]

    def set_dropout(self, p: float) -> None:
        """Set the input dropout of every adapter."""
        for a in self.adapters.values():
            a.dropout = p

    def parameter_count(self) -> int:
        """Return the number of trainable scalars, sum of r * (d_in + d_out)."""
        return sum(p.numel() for p in self.parameters())
