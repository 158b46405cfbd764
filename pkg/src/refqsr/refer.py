"""Reference-based error refinement (RefER).

A query feature ``fq`` and the matching high-bit reference feature ``fr``
(both C x H x W) are L2-normalized, pooled 3x3 and quantized to the low bit
width.  A dense cost volume between the pooled maps gives, per query
position, the best-matching reference position.  That pooled flow is
upsampled to full resolution, ``fr`` is backward-warped onto the query grid,
and a small high-bit conv head turns ``fq - warped`` into a correction that
is added back to ``fq``.

Flows hold absolute source coordinates, channel 0 = x (column), 1 = y (row).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ZeroNormError
from .quantizer import fake_quant
from .tensor_core import DTYPE, bilinear_resize, conv2d, pool

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1000.0


@dataclass(frozen=True)
class CostVolume:
    values: np.ndarray  # (h, w, h, w): query position (iy, ix), reference position (jy, jx)

    @property
    def pooled_shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True)
class Flow:
    values: np.ndarray  # (2, H, W)
    resolution: str  # "pooled" or "full"


def _single(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=DTYPE)
    if f.ndim == 4 and f.shape[0] == 1:
        f = f[0]
    if f.ndim != 3:
        raise DimensionError(f"expected a C x H x W feature, got shape {f.shape}")
    return f


def l2_normalize(f: np.ndarray) -> np.ndarray:
    norm = float(np.sqrt(np.sum(np.square(f, dtype=np.float64))))
    if norm == 0.0:
        raise ZeroNormError("feature has zero L2 norm")
    return (f / DTYPE(norm)).astype(DTYPE)


def preprocess_features(f: np.ndarray, bits: int, pool_mode: str = "average_k3s3") -> np.ndarray:
    """Normalize by the global L2 norm, pool, then quantize at ``bits`` with
    min/max calibration of the pooled map."""
    f = _single(f)
    pooled = pool(l2_normalize(f)[None], pool_mode)[0]
    return fake_quant(pooled, bits)


def cost_volume(fq: np.ndarray, fr: np.ndarray) -> CostVolume:
    fq, fr = _single(fq), _single(fr)
    if fq.shape != fr.shape:
        raise DimensionError(f"query {fq.shape} and reference {fr.shape} differ")
    c, h, w = fq.shape
    e = fq.reshape(c, h * w).T @ fr.reshape(c, h * w)
    return CostVolume(e.reshape(h, w, h, w).astype(DTYPE))


def pooled_flow(cost: CostVolume, temperature: float = DEFAULT_TEMPERATURE, mode: str = "hard") -> np.ndarray:
    """(2, h, w) flow on the pooled grid.

    ``soft``: temperature-scaled softmax over every reference position and the
    expected coordinate.  ``hard``: coordinate of the row-major first argmax.
    """
    h, w = cost.pooled_shape
    e = cost.values.reshape(h * w, h * w).astype(np.float64)
    jy, jx = np.divmod(np.arange(h * w), w)
    if mode == "hard":
        best = np.argmax(e, axis=1)
        fx, fy = jx[best].astype(np.float64), jy[best].astype(np.float64)
    elif mode == "soft":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        z = temperature * e
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        fx, fy = p @ jx, p @ jy
    else:
        raise ValueError(f"unknown flow mode {mode!r}")
    return np.stack([fx.reshape(h, w), fy.reshape(h, w)]).astype(DTYPE)


def upsample_flow(flow: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Pooled-grid coordinates -> full-resolution coordinates.

    Bilinear resize with value scaling, plus the half-pixel shift
    (scale - 1) / 2 that maps a pooled pixel centre onto the centre of the
    window it summarises; clamped to the image box.
    """
    _, h, w = flow.shape
    up = bilinear_resize(flow[None], target_h, target_w, scale_values=True)[0]
    sx, sy = target_w / w, target_h / h
    up[0] = np.clip(up[0] + DTYPE((sx - 1) / 2), 0, target_w - 1)
    up[1] = np.clip(up[1] + DTYPE((sy - 1) / 2), 0, target_h - 1)
    return up


def flow_from_cost(
    cost: CostVolume,
    temperature: float = DEFAULT_TEMPERATURE,
    mode: str = "hard",
    target_h: int | None = None,
    target_w: int | None = None,
) -> Flow:
    p = pooled_flow(cost, temperature, mode)
    if target_h is None and target_w is None:
        return Flow(p, "pooled")
    return Flow(upsample_flow(p, target_h, target_w), "full")


def backward_warp(fr: np.ndarray, flow: Flow | np.ndarray) -> np.ndarray:
    """out[:, y, x] = bilinear sample of ``fr`` at (flow_x, flow_y)."""
    fr = _single(fr)
    fl = flow.values if isinstance(flow, Flow) else np.asarray(flow, dtype=DTYPE)
    c, h, w = fr.shape
    if fl.shape != (2, h, w):
        raise DimensionError(f"flow shape {fl.shape} does not match feature {h}x{w}")
    x = np.clip(fl[0].astype(np.float64), 0, w - 1)
    y = np.clip(fl[1].astype(np.float64), 0, h - 1)
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    wx, wy = (x - x0).astype(DTYPE), (y - y0).astype(DTYPE)
    top = fr[:, y0, x0] * (1 - wx) + fr[:, y0, x1] * wx
    bot = fr[:, y1, x0] * (1 - wx) + fr[:, y1, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(DTYPE)


def refinement_head(d: np.ndarray, layers: list[tuple[np.ndarray, np.ndarray]], bits: int) -> np.ndarray:
    """Quantized conv stack with ReLU between layers; inputs and weights are
    quantized at ``bits`` with per-call min/max calibration."""
    x = _single(d)[None]
    for i, (weight, bias) in enumerate(layers):
        act = "relu" if i < len(layers) - 1 else "none"
        k = weight.shape[-1]
        x = conv2d(fake_quant(x, bits), fake_quant(weight, bits), bias, padding=k // 2, activation=act)
    return x[0]


@dataclass
class ReferOutput:
    feature: np.ndarray
    flow: Flow | None
    fallback: bool = False


def refer_block(
    fq: np.ndarray,
    fr: np.ndarray,
    head: list[tuple[np.ndarray, np.ndarray]],
    head_bits: int,
    low_bits: int,
    temperature: float = DEFAULT_TEMPERATURE,
    flow_mode: str = "hard",
) -> ReferOutput:
    fq, fr = _single(fq), _single(fr)
    if fq.shape != fr.shape:
        raise DimensionError(f"query {fq.shape} and reference {fr.shape} differ")
    try:
        pq = preprocess_features(fq, low_bits)
        pr = preprocess_features(fr, low_bits)
    except ZeroNormError:
        log.warning("RefER: zero-norm feature, passing the query feature through unchanged")
        return ReferOutput(fq, None, fallback=True)
    _, h, w = fq.shape
    flow = flow_from_cost(cost_volume(pq, pr), temperature, flow_mode, h, w)
    diff = fq - backward_warp(fr, flow)
    return ReferOutput((fq + refinement_head(diff, head, head_bits)).astype(DTYPE), flow)


def refer_forward(fq, fr, head, policy, block: int | None = None, temperature: float = DEFAULT_TEMPERATURE, flow_mode: str = "hard") -> np.ndarray:
    """``fq + Head(fq - warp(fr))`` with the head at the policy's high bits."""
    high = policy.b_high if block is None else policy.high_bits(block)
    return refer_block(fq, fr, head, high, policy.b_low, temperature, flow_mode).feature
