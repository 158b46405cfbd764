"""PPM (P6, maxval 255) and optional PNG image I/O.

Loaded images are 1 x 3 x H x W float32 in [0, 1] (value / 255).  Saving
maps v -> floor(v * 255 + 0.5) after clipping to [0, 1], so any image on
the 8-bit grid round-trips exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ImageFormatError
from .tensor_core import DTYPE

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _header_tokens(data: bytes, count: int) -> tuple[list[tuple[bytes, int]], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments.
    Returns [(token, offset)] and the offset of the single whitespace byte
    that ends the header."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i] in _WHITESPACE:
            i += 1
        if i < n and data[i] == ord("#"):
            while i < n and data[i] not in b"\r\n":
                i += 1
            continue
        if i >= n:
            raise ImageFormatError("truncated PPM header", i)
        start = i
        while i < n and data[i] not in _WHITESPACE and data[i] != ord("#"):
            i += 1
        tokens.append((data[start:i], start))
    if i >= n or data[i] not in _WHITESPACE:
        raise ImageFormatError("expected one whitespace byte after the PPM header", i)
    return tokens, i


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise ImageFormatError(f"bad magic {data[:2]!r}: only binary PPM (P6) is supported", 0)
    tokens, end = _header_tokens(data, 4)
    vals = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise ImageFormatError(f"expected an integer in the PPM header, got {tok!r}", off)
        vals.append(int(tok))
    w, h, maxval = vals
    if w < 1 or h < 1:
        raise ImageFormatError(f"invalid PPM size {w}x{h}", tokens[1][1])
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255)", tokens[3][1])
    start = end + 1
    need = 3 * w * h
    if len(data) - start < need:
        raise ImageFormatError(f"pixel data truncated: need {need} bytes, have {len(data) - start}", len(data))
    if len(data) - start > need:
        raise ImageFormatError(f"{len(data) - start - need} trailing bytes after pixel data", start + need)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(DTYPE) / DTYPE(255))[None]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """1x3xHxW / 3xHxW float in [0, 1] -> H x W x 3 uint8 (round half up)."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ImageFormatError(f"cannot save a batch of {x.shape[0]} images", 0)
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise ImageFormatError(f"expected a 3-channel image, got shape {x.shape}", 0)
    q = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return q.transpose(1, 2, 0)


def encode_ppm(image: np.ndarray) -> bytes:
    px = to_uint8(image)
    h, w, _ = px.shape
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


def _pil():
    try:
        from PIL import Image
    except ImportError as e:  # optional dependency
        raise ImageFormatError("PNG support needs Pillow (pip install 'artifact[png]')", 0) from e
    return Image


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        with _pil().open(path) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return (px.transpose(2, 0, 1).astype(DTYPE) / DTYPE(255))[None]
    return decode_ppm(path.read_bytes())


def save_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        _pil().fromarray(to_uint8(image)).save(path)
        return
    path.write_bytes(encode_ppm(image))


def image_io(path: str | Path, direction: str, image: np.ndarray | None = None):
    if direction == "load":
        return load_image(path)
    if direction == "save":
        if image is None:
            raise ValueError("save needs an image")
        save_image(path, image)
        return image
    raise ValueError(f"direction must be 'load' or 'save', got {direction!r}")
