"""Frequency-band and spatial random masking of images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FILL_VALUE = 0.5
MODES = ("low-pass", "high-pass", "none")


@dataclass(frozen=True)
class MaskSpec:
    mode: str = "none"
    radius: float = 8.0
    ratio: float = 0.0
    region_min: int = 1
    region_max: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.radius > 0:
            raise ValueError("frequency radius must be positive")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("spatial ratio must lie in [0, 1]")
        if not 1 <= self.region_min <= self.region_max:
            raise ValueError("region size range must satisfy 1 <= min <= max")


def _radius_grid(h: int, w: int) -> np.ndarray:
    v = np.arange(h) - h // 2
    u = np.arange(w) - w // 2
    return np.hypot(v[:, None], u[None, :])


def frequency_band_mask(img, mode: str, radius: float) -> np.ndarray:
    """Zero centered-spectrum coefficients outside (low-pass) or inside (high-pass) ``radius``.

    A coefficient exactly at ``radius`` belongs to the low-pass side, so the
    two modes partition the spectrum.
    """
    img = np.asarray(img, dtype=np.float64)
    if mode == "none":
        return img.copy()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    h, w = img.shape[-2:]
    if not 0 < radius <= min(h, w) / 2:
        raise ValueError(f"radius {radius} outside (0, {min(h, w) / 2}]")
    keep = _radius_grid(h, w) <= radius
    if mode == "high-pass":
        keep = ~keep
    spec = np.fft.fftshift(np.fft.fft2(img, norm="ortho"), axes=(-2, -1))
    spec = spec * keep
    return np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1)), norm="ortho").real


def spatial_random_mask(img, ratio: float, region_range: tuple[int, int] = (1, 8),
                        seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Fill random rectangles with mid-gray until ``ratio`` of pixels are covered.

    Returns the masked image and the boolean ``(H, W)`` mask. Coverage ends
    in ``[ratio, ratio + max_region_area / (H*W)]``.
    """
    img = np.asarray(img, dtype=np.float64)
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    lo, hi = region_range
    if not 1 <= lo <= hi:
        raise ValueError("region range must satisfy 1 <= min <= max")
    h, w = img.shape[-2:]
    mask = np.zeros((h, w), dtype=bool)
    target = ratio * h * w
    if ratio >= 1.0:
        mask[:] = True
    else:
        rng = np.random.default_rng(seed)
        covered = 0
        while covered < target - 1e-9:
            rh = int(rng.integers(lo, min(hi, h) + 1)) if lo <= h else h
            rw = int(rng.integers(lo, min(hi, w) + 1)) if lo <= w else w
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            block = mask[y0:y0 + rh, x0:x0 + rw]
            covered += int(block.size - block.sum())
            block[:] = True
    out = img.copy()
    out[..., mask] = FILL_VALUE
    return out, mask


def apply_mask_spec(img, spec: MaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Frequency masking first, then spatial masking."""
    out = frequency_band_mask(img, spec.mode, spec.radius) if spec.mode != "none" else np.asarray(img, float).copy()
    return spatial_random_mask(out, spec.ratio, (spec.region_min, spec.region_max), spec.seed)
