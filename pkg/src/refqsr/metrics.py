"""Image quality metrics, loss quantities and the reference/query pair sampler."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .clustblock import cosine, extract_features
from .errors import DimensionError, SamplingError

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
# ITU-R BT.601 luma as used by MATLAB rgb2ycbcr, for inputs in [0, 1]
_Y_WEIGHTS = np.array([65.481, 128.553, 24.966]) / 255.0
_Y_OFFSET = 16.0 / 255.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def to_luma(x: np.ndarray) -> np.ndarray:
    """3 x H x W (or 1 x 3 x H x W) RGB in [0, 1] -> H x W luma; other inputs
    are squeezed and returned as float64."""
    x = np.asarray(x, dtype=np.float64)
    while x.ndim > 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim == 3 and x.shape[0] == 3:
        return _Y_OFFSET + np.tensordot(_Y_WEIGHTS, x, axes=1)
    return np.squeeze(x)


def psnr(a, b, peak: float = 1.0, luma: bool = True) -> float:
    """PSNR in dB on the luma channel (``luma=False``: on all values).
    Identical inputs give ``PSNR_CAP``."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    if luma:
        a, b = to_luma(a), to_luma(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


@dataclass(frozen=True)
class SSIMResult:
    value: float
    windowless: bool  # True when the image was smaller than the window


def _ssim_global(a, b, c1, c2) -> float:
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - ma) * (b - mb)).mean()
    return float(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))


def ssim_full(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5, luma: bool = True) -> SSIMResult:
    a, b = _pair(a, b)
    if luma:
        a, b = to_luma(a), to_luma(b)
    if a.ndim != 2:
        raise DimensionError(f"ssim needs a single-channel image, got shape {a.shape}")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    if min(a.shape) < window:
        log.warning("image %s smaller than the %dx%d SSIM window; using global statistics", a.shape, window, window)
        return SSIMResult(_ssim_global(a, b, c1, c2), True)
    g = gaussian_window(window, sigma)
    view = np.lib.stride_tricks.sliding_window_view

    def filt(x):
        return np.einsum("ijkl,kl->ij", view(x, g.shape), g)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return SSIMResult(float(np.mean(num / den)), False)


def ssim(a, b, peak: float = 1.0, luma: bool = True) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), mean over valid windows."""
    a_, b_ = _pair(a, b)
    if np.array_equal(a_, b_):
        return 1.0
    return ssim_full(a_, b_, peak, luma=luma).value


def l1_loss(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class LossWeights:
    lambda_1: float = 1.0
    lambda_kd: float = 1.0

    def __post_init__(self):
        if self.lambda_1 < 0 or self.lambda_kd < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(outputs_r, outputs_q, targets_r, targets_q, teacher_r, teacher_q, w: LossWeights = LossWeights()) -> float:
    """lambda_1 * (L1 to ground truth, both paths) + lambda_kd * (L1 to the
    full-precision teacher, both paths)."""
    rec = l1_loss(outputs_r, targets_r) + l1_loss(outputs_q, targets_q)
    kd = l1_loss(outputs_r, teacher_r) + l1_loss(outputs_q, teacher_q)
    return w.lambda_1 * rec + w.lambda_kd * kd


# -- pair sampling -------------------------------------------------------------


@dataclass
class PairSample:
    query_lr: np.ndarray
    query_hr: np.ndarray
    ref_lr: np.ndarray
    ref_hr: np.ndarray
    similarity: float
    image_index: int = 0
    query_origin: tuple[int, int] = (0, 0)  # LR (row, col)
    ref_origin: tuple[int, int] = (0, 0)


def _crop(img: np.ndarray, y: int, x: int, size: int) -> np.ndarray:
    return img[..., y : y + size, x : x + size]


def sample_training_pairs(
    images,
    extractor: dict[str, np.ndarray],
    tau: float = 0.5,
    n: int = 16,
    max_retries: int = 100,
    crop: int = 48,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> list[PairSample]:
    """Draw ``n`` (query, reference) crop pairs, both from one image, with
    feature cosine similarity > ``tau``.

    Images are visited in random order.  An image that fails ``max_retries``
    times in a row is dropped with a warning; once every image is dropped a
    :class:`SamplingError` is raised.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    pairs = []
    for lr, hr in images:
        lr, hr = np.asarray(lr, dtype=np.float32), np.asarray(hr, dtype=np.float32)
        lr, hr = (lr[0] if lr.ndim == 4 else lr), (hr[0] if hr.ndim == 4 else hr)
        h, w = lr.shape[-2:]
        if h < crop or w < crop:
            raise DimensionError(f"LR image {h}x{w} smaller than the {crop}x{crop} crop")
        scale = hr.shape[-1] // w
        if hr.shape[-2:] != (scale * h, scale * w) or scale < 1:
            raise DimensionError(f"HR {hr.shape[-2:]} is not an integer multiple of LR {(h, w)}")
        pairs.append((lr, hr, scale))
    if not pairs:
        raise SamplingError("no images to sample from")

    alive = list(range(len(pairs)))
    out: list[PairSample] = []
    while len(out) < n:
        if not alive:
            raise SamplingError(f"all images exhausted after {len(out)} of {n} samples")
        idx = alive[int(rng.integers(len(alive)))]
        lr, hr, s = pairs[idx]
        h, w = lr.shape[-2:]
        for _ in range(max_retries):
            (qy, ry), (qx, rx) = rng.integers(0, h - crop + 1, 2), rng.integers(0, w - crop + 1, 2)
            q, r = _crop(lr, qy, qx, crop), _crop(lr, ry, rx, crop)
            fq, fr = extract_features(np.stack([q, r]), extractor)
            sim = cosine(fq, fr)
            if sim > tau:
                out.append(PairSample(
                    q.copy(), _crop(hr, s * qy, s * qx, s * crop).copy(),
                    r.copy(), _crop(hr, s * ry, s * rx, s * crop).copy(),
                    sim, idx, (int(qy), int(qx)), (int(ry), int(rx)),
                ))
                break
        else:
            log.warning("image %d: no pair above tau=%.3f in %d tries; dropping it", idx, tau, max_retries)
            alive.remove(idx)
    return out
