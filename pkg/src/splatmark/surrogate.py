"""Linear stand-in for a strided VAE: Gaussian blur plus stride sampling.

Images are channel-first float arrays ``(C, H, W)`` with ``H = stride*h``.
Latent cell ``n`` covers pixels ``stride*n .. stride*n + stride - 1``; its
sample point is the block center ``stride*n + (stride - 1)/2``, so
decode/encode share a center and the round trip introduces no phase offset.
Both directions are separable and applied as dense per-axis matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .spectral import LatentGrid

BOUNDARY_MODES = ("circular", "replicate")


@dataclass(frozen=True)
class SurrogateConfig:
    stride: int = 8
    sigma: float | None = None  # pixels; defaults to stride / 2
    radius: int | None = None  # pixels; defaults to ceil(3 * sigma)
    boundary: str = "circular"

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.sigma is None:
            object.__setattr__(self, "sigma", self.stride / 2)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        min_radius = math.ceil(3 * self.sigma)
        if self.radius is None:
            object.__setattr__(self, "radius", min_radius)
        if self.radius < min_radius:
            raise ValueError(f"radius {self.radius} is below ceil(3*sigma) = {min_radius}")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}, got {self.boundary!r}")


def kernel_taps(sigma: float, radius: int, half_offset: bool) -> tuple[np.ndarray, np.ndarray]:
    """Offsets and normalized Gaussian weights.

    ``half_offset`` puts taps at half-integers (used when sampling between
    pixel centers).
    """
    if half_offset:
        offsets = np.arange(-radius, radius) + 0.5
    else:
        offsets = np.arange(-radius, radius + 1).astype(np.float64)
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    return offsets, w / w.sum()


def _wrap(idx: np.ndarray, n: int, boundary: str) -> np.ndarray:
    return idx % n if boundary == "circular" else np.clip(idx, 0, n - 1)


@lru_cache(maxsize=32)
def _encode_matrix(n_lat: int, cfg: SurrogateConfig) -> np.ndarray:
    n_pix = n_lat * cfg.stride
    center = (cfg.stride - 1) / 2
    half = cfg.stride % 2 == 0
    offsets, weights = kernel_taps(cfg.sigma, cfg.radius, half)
    m = np.zeros((n_lat, n_pix))
    for n in range(n_lat):
        src = np.rint(cfg.stride * n + center - offsets).astype(np.int64)
        np.add.at(m[n], _wrap(src, n_pix, cfg.boundary), weights)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=32)
def _decode_matrix(n_lat: int, cfg: SurrogateConfig) -> np.ndarray:
    n_pix = n_lat * cfg.stride
    offsets, weights = kernel_taps(cfg.sigma, cfg.radius, False)
    block = np.zeros((n_pix, n_lat))
    block[np.arange(n_pix), np.arange(n_pix) // cfg.stride] = 1.0
    blur = np.zeros((n_pix, n_pix))
    for i in range(n_pix):
        src = i - offsets.astype(np.int64)
        np.add.at(blur[i], _wrap(src, n_pix, cfg.boundary), weights)
    m = blur @ block
    m.setflags(write=False)
    return m


def decode_upsample(z: LatentGrid, cfg: SurrogateConfig = SurrogateConfig()) -> np.ndarray:
    """Expand each latent cell to a stride x stride block, then blur."""
    dy = _decode_matrix(z.height, cfg)
    dx = _decode_matrix(z.width, cfg)
    return np.einsum("ij,cjk,lk->cil", dy, z.values, dx, optimize=True)


def encode_downsample(img, cfg: SurrogateConfig = SurrogateConfig()) -> LatentGrid:
    """Blur, then sample every ``stride`` pixels at block centers."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    _, hp, wp = img.shape
    if hp % cfg.stride or wp % cfg.stride:
        raise ValueError(f"image size {hp}x{wp} is not divisible by stride {cfg.stride}")
    ey = _encode_matrix(hp // cfg.stride, cfg)
    ex = _encode_matrix(wp // cfg.stride, cfg)
    return LatentGrid(np.einsum("ij,cjk,lk->cil", ey, img, ex, optimize=True))
