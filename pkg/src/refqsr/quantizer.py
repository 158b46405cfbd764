"""Fake quantization, per-layer quantization configs and the bit policy.

The grid is anchored at the lower clip bound::

    q(x) = alpha + round((clip(x, alpha, beta) - alpha) / s) * s
    s    = (beta - alpha) / (2**bits - 1)

so that every output lies in [alpha, beta] and both bounds are exactly
representable.  ``round`` is half-away-from-zero (the argument is never
negative here, so it is ``floor(y + 0.5)``).  Arithmetic happens in float64
and the result is cast back to float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import InvalidPolicyError
from .tensor_core import DTYPE, conv2d

FULL_PRECISION = 32


@dataclass(frozen=True)
class QuantParams:
    alpha: float
    beta: float
    bits: int

    def __post_init__(self):
        if not (self.alpha < self.beta):
            raise ValueError(f"alpha ({self.alpha}) must be < beta ({self.beta})")
        if not (2 <= self.bits <= 32):
            raise ValueError(f"bits must lie in [2, 32], got {self.bits}")

    def with_bits(self, bits: int) -> "QuantParams":
        return QuantParams(self.alpha, self.beta, bits)


def step_size(params: QuantParams) -> float:
    return (params.beta - params.alpha) / (2**params.bits - 1)


def quantize(x: np.ndarray, params: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    a, b = float(params.alpha), float(params.beta)
    s = step_size(params)
    codes = np.floor((np.clip(x, a, b) - a) / s + 0.5)
    out = np.clip(a + codes * s, a, b)
    return out.astype(DTYPE)


def quantize_codes(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Integer codes in [0, 2**bits - 1] for ``x`` (the grid index)."""
    x = np.asarray(x, dtype=np.float64)
    a = float(params.alpha)
    codes = np.floor((np.clip(x, a, params.beta) - a) / step_size(params) + 0.5)
    return codes.astype(np.int64)


def calibrate(x: np.ndarray, bits: int) -> QuantParams | None:
    """Min/max calibration.  Returns None for a constant tensor (nothing to clip)."""
    lo, hi = float(np.min(x)), float(np.max(x))
    if not lo < hi:
        return None
    return QuantParams(lo, hi, bits)


def fake_quant(x: np.ndarray, bits: int, bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Quantize ``x`` at ``bits`` with fixed ``bounds`` or min/max calibration.

    ``bits >= 32`` is treated as full precision and returns ``x`` untouched.
    """
    if bits >= FULL_PRECISION:
        return x
    params = QuantParams(*bounds, bits) if bounds is not None else calibrate(x, bits)
    return x if params is None else quantize(x, params)


@dataclass(frozen=True)
class LayerQuantConfig:
    weight_params: QuantParams | None = None
    activation_params: QuantParams | None = None
    quantize_weights: bool = True
    quantize_activations: bool = True

    @classmethod
    def passthrough(cls) -> "LayerQuantConfig":
        """Config for the unquantized head and tail layers."""
        return cls(None, None, False, False)


def quantized_conv(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    cfg: LayerQuantConfig,
    stride: int = 1,
    padding: int = 0,
    activation: str = "none",
) -> np.ndarray:
    """conv2d over fake-quantized input and weight.  Biases stay in float."""
    if cfg.quantize_activations and cfg.activation_params is not None:
        x = quantize(x, cfg.activation_params)
    if cfg.quantize_weights and cfg.weight_params is not None:
        weight = quantize(weight, cfg.weight_params)
    return conv2d(x, weight, bias, stride=stride, padding=padding, activation=activation)


def round_half_up_mean(a: int, b: int) -> int:
    return (a + b + 1) // 2


@dataclass(frozen=True)
class BitPolicy:
    """The (b_high, b_medium, b_low) assignment for reference and query paths.

    ``per_layer_override`` maps a ResBlock index to the high bit-width used
    there, standing in for a dynamically selected precision.  The query-path
    weight precision of that block is re-derived from it.
    """

    b_high: int
    b_low: int
    per_layer_override: Mapping[int, int] = field(default_factory=dict)
    first_block_high: bool = True

    def __post_init__(self):
        for name, bits in (("b_high", self.b_high), ("b_low", self.b_low)):
            if not 2 <= bits <= 32:
                raise InvalidPolicyError(f"{name}={bits} outside [2, 32]")
        if self.b_low > self.b_high:
            raise InvalidPolicyError(f"b_low ({self.b_low}) > b_high ({self.b_high})")
        for k, bits in self.per_layer_override.items():
            if not self.b_low <= bits <= 32:
                raise InvalidPolicyError(f"override for block {k} ({bits}) outside [b_low, 32]")
        object.__setattr__(self, "per_layer_override", MappingProxyType(dict(self.per_layer_override)))

    @property
    def b_medium(self) -> int:
        return round_half_up_mean(self.b_high, self.b_low)

    def high_bits(self, block: int) -> int:
        return self.per_layer_override.get(block, self.b_high)

    def medium_bits(self, block: int) -> int:
        return round_half_up_mean(self.high_bits(block), self.b_low)

    def to_dict(self) -> dict:
        return {
            "b_high": self.b_high,
            "b_medium": self.b_medium,
            "b_low": self.b_low,
            "per_layer_override": {str(k): v for k, v in sorted(self.per_layer_override.items())},
        }


def derive_bit_policy(b_high: int, b_low: int, per_layer_override: Mapping[int, int] | None = None) -> BitPolicy:
    return BitPolicy(b_high, b_low, dict(per_layer_override or {}))
