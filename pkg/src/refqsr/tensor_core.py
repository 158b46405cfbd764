"""Deterministic float32 kernels for the backbone, ClustBlock and RefER.

Tensors are plain ``numpy`` arrays in (batch, channel, height, width) layout.
No operation mutates its inputs.  Reductions go through numpy's pairwise
summation, which keeps results reproducible across runs.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, InvalidGeometryError

DTYPE = np.float32


def as_tensor(x, ndim: int = 4) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-D tensor, got shape {arr.shape}")
    return arr


def _conv_im2col(x, weight, stride, ho, wo):
    b, c = x.shape[:2]
    c_out, _, kh, kw = weight.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (B*Ho*Wo, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(c_out, -1).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2))


def _conv_contract_shift(x, weight, ho, wo):
    """Stride-1 conv as one channel contraction for every tap followed by
    shifted adds; avoids the im2col copy when C_in >= C_out."""
    b, c, hp, wp = x.shape
    c_out, _, kh, kw = weight.shape
    wm = weight.transpose(0, 2, 3, 1).reshape(c_out * kh * kw, c)
    out = np.zeros((b, c_out, ho, wo), dtype=DTYPE)
    for n in range(b):
        y = (wm @ x[n].reshape(c, hp * wp)).reshape(c_out, kh, kw, hp, wp)
        for i in range(kh):
            for j in range(kw):
                out[n] += y[:, i, j, i : i + ho, j : j + wo]
    return out


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    activation: str = "none",
) -> np.ndarray:
    """2-D cross-correlation (no kernel flip).  Uses whichever of im2col or
    contract-then-shift needs the smaller intermediate."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    b, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"input has {c} channels, weight expects {c_in}")
    if stride < 1 or padding < 0:
        raise InvalidGeometryError(f"bad stride/padding {stride}/{padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0 or b == 0:
        raise InvalidGeometryError(
            f"conv of {h}x{w} with {kh}x{kw} kernel, stride {stride}, pad {padding} is empty"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if stride == 1 and c >= c_out:
        out = _conv_contract_shift(x, weight, ho, wo)
    else:
        out = _conv_im2col(x, weight, stride, ho, wo)
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
        out = out + bias[:, None, None]
    if activation == "relu":
        out = np.maximum(out, 0, out=out)
    elif activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return out.astype(DTYPE, copy=False)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``weight @ x + bias``; ``x`` may be a vector or an (N, in) batch."""
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"cannot apply {weight.shape} weight to input {x.shape}")
    out = x @ weight.T
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out.astype(DTYPE, copy=False)


def pool(x: np.ndarray, mode: str = "global_average") -> np.ndarray:
    """Global average pooling, or kernel-3/stride-3 average pooling.

    ``average_k3s3`` yields ceil(H/3) x ceil(W/3); a partial window at the
    bottom/right edge averages only the pixels it actually covers.
    """
    x = as_tensor(x)
    b, c, h, w = x.shape
    if x.size == 0:
        raise DimensionError("cannot pool an empty tensor")
    if mode == "global_average":
        flat = x.reshape(b, c, h * w)
        return flat.mean(axis=-1, dtype=DTYPE).reshape(b, c, 1, 1)
    if mode != "average_k3s3":
        raise ValueError(f"unknown pool mode {mode!r}")
    ho, wo = -(-h // 3), -(-w // 3)
    padded = np.zeros((b, c, ho * 3, wo * 3), dtype=DTYPE)
    padded[:, :, :h, :w] = x
    sums = padded.reshape(b, c, ho, 3, wo, 3).sum(axis=(3, 5), dtype=DTYPE)
    rows = np.minimum(3, h - 3 * np.arange(ho)).astype(DTYPE)
    cols = np.minimum(3, w - 3 * np.arange(wo)).astype(DTYPE)
    return (sums / np.outer(rows, cols)).astype(DTYPE)


def _axis_taps(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(DTYPE)
    return lo, hi, frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int, scale_values: bool = False) -> np.ndarray:
    """Bilinear resampling with the align-corners-false convention.

    Source coordinate = (dst + 0.5) * (in / out) - 0.5, clamped to the valid
    range.  With ``scale_values`` the input is a 2-channel (x, y) flow and
    each channel is multiplied by the scale factor of its own axis.
    """
    x = as_tensor(x)
    b, c, h, w = x.shape
    if out_h < 1 or out_w < 1 or x.size == 0:
        raise DimensionError(f"cannot resize {x.shape} to {out_h}x{out_w}")
    if scale_values and c != 2:
        raise DimensionError("scale_values needs a 2-channel (x, y) tensor")
    if (out_h, out_w) == (h, w):
        out = x.copy()
    else:
        ylo, yhi, fy = _axis_taps(h, out_h)
        xlo, xhi, fx = _axis_taps(w, out_w)
        top = x[:, :, ylo, :]
        bot = x[:, :, yhi, :]
        rows = top * (1 - fy)[:, None] + bot * fy[:, None]
        out = rows[:, :, :, xlo] * (1 - fx) + rows[:, :, :, xhi] * fx
        out = out.astype(DTYPE)
    if scale_values:
        out[:, 0] *= DTYPE(out_w / w)
        out[:, 1] *= DTYPE(out_h / h)
    return out


def pixel_shuffle(x: np.ndarray, upscale: int) -> np.ndarray:
    """Depth-to-space: (B, C*r*r, H, W) -> (B, C, H*r, W*r)."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    r = upscale
    if r < 1 or c % (r * r):
        raise DimensionError(f"{c} channels not divisible by upscale^2 = {r * r}")
    out = x.reshape(b, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(b, c // (r * r), h * r, w * r))


def pixel_unshuffle(x: np.ndarray, downscale: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    r = downscale
    if r < 1 or h % r or w % r:
        raise DimensionError(f"spatial size {h}x{w} not divisible by {r}")
    out = x.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(b, c * r * r, h // r, w // r))


def softmax(x: np.ndarray, axis: str = "rows") -> np.ndarray:
    """Max-subtracted softmax of a matrix; each row (or column) sums to 1."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax expects a matrix, got shape {x.shape}")
    ax = {"rows": 1, "cols": 0}[axis]
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    return e / e.sum(axis=ax, keepdims=True)
