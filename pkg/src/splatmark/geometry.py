"""Micro-geometric attacks and the closed-form phase predictors they are checked against.

Pixel ``(row i, col j)`` has continuous coordinate ``(x=j, y=i)``; rotations
act about the image center ``((W-1)/2, (H-1)/2)``. Angles are degrees at the
public boundary and radians inside.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

MAX_ROTATION_DEG = 45.0
SCALE_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class GeometricTransform:
    """Rotation, then translation, then scale about the center, then padding."""

    dx: float = 0.0
    dy: float = 0.0
    theta_deg: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if abs(self.theta_deg) > MAX_ROTATION_DEG:
            raise ValueError(f"|theta| must be <= {MAX_ROTATION_DEG} degrees, got {self.theta_deg}")
        lo, hi = SCALE_RANGE
        if not lo < self.scale < hi:
            raise ValueError(f"scale must lie in ({lo}, {hi}), got {self.scale}")

    @property
    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.theta_deg == 0 and self.scale == 1

    @property
    def translation_norm(self) -> float:
        return math.hypot(self.dx, self.dy)

    def inverse_parts(self) -> tuple[float, float, float, float]:
        return -self.dx, -self.dy, -self.theta_deg, 1.0 / self.scale

    def to_json(self) -> dict:
        return {
            "translation_x_px": self.dx,
            "translation_y_px": self.dy,
            "rotation_deg": self.theta_deg,
            "scale": self.scale,
        }

    @classmethod
    def from_json(cls, data: dict) -> GeometricTransform:
        return cls(
            dx=float(data.get("translation_x_px", 0.0)),
            dy=float(data.get("translation_y_px", 0.0)),
            theta_deg=float(data.get("rotation_deg", 0.0)),
            scale=float(data.get("scale", 1.0)),
        )


@dataclass(frozen=True)
class PerturbationBounds:
    translation_px: float = 10.0
    rotation_deg: float = 5.0
    scale_lo: float = 0.97
    scale_hi: float = 1.03

    def __post_init__(self):
        if self.translation_px < 0 or self.rotation_deg < 0:
            raise ValueError("bounds must be non-negative")
        if self.rotation_deg > MAX_ROTATION_DEG:
            raise ValueError(f"rotation bound exceeds {MAX_ROTATION_DEG} degrees")
        if not SCALE_RANGE[0] < self.scale_lo <= self.scale_hi < SCALE_RANGE[1]:
            raise ValueError("scale bounds must satisfy 0.5 < lo <= hi < 2")

    @classmethod
    def zero(cls) -> PerturbationBounds:
        return cls(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class PhasePrediction:
    phase_range: float
    alpha: float
    drift: float
    attenuation: float

    def as_dict(self) -> dict:
        return asdict(self)


def rotation_matrix(theta_deg: float) -> np.ndarray:
    """2x2 rotation, exact at multiples of 90 degrees."""
    quarter, rem = divmod(theta_deg, 90.0)
    if rem == 0:
        c, s = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter) % 4]
    else:
        t = math.radians(theta_deg)
        c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def forward_map(points: np.ndarray, t: GeometricTransform, shape: tuple[int, int]) -> np.ndarray:
    """Where the transform sends continuous ``(x, y)`` points."""
    h, w = shape
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    p = np.asarray(points, dtype=np.float64)
    rot = rotation_matrix(t.theta_deg)
    q = (p - c) @ rot.T + c
    q = q + np.array([t.dx, t.dy])
    return t.scale * (q - c) + c


def inverse_map(points: np.ndarray, dx: float, dy: float, theta_deg: float, scale: float, shape) -> np.ndarray:
    h, w = shape
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    p = np.asarray(points, dtype=np.float64)
    q = (p - c) / scale + c
    q = q - np.array([dx, dy])
    rot = rotation_matrix(theta_deg)
    return (q - c) @ rot + c  # rot.T is the inverse rotation; row-vector form


def _snap(a: np.ndarray) -> np.ndarray:
    r = np.rint(a)
    return np.where(np.abs(a - r) < 1e-9, r, a)


def warp(img, dx: float = 0.0, dy: float = 0.0, theta_deg: float = 0.0, scale: float = 1.0,
         pad_source=None, circular: bool = False) -> np.ndarray:
    """Resample ``img`` (``(C, H, W)`` or ``(H, W)``) under rotate/translate/scale.

    Composite inverse mapping with a single bilinear resample. Output pixels
    whose source falls outside the image take ``pad_source``'s value (zero
    if None); with ``circular=True`` coordinates wrap instead.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    _, h, w = img.shape
    if pad_source is None:
        pad = np.zeros_like(img)
    else:
        pad = np.asarray(pad_source, dtype=np.float64).reshape(img.shape)

    if dx == 0 and dy == 0 and theta_deg == 0 and scale == 1:
        out = img.copy()
        return out[0] if squeeze else out

    # same composite map as inverse_map, broadcast over the pixel grid
    cx, cy = (w - 1) / 2, (h - 1) / 2
    rot = rotation_matrix(theta_deg)
    qx = (np.arange(w, dtype=np.float64)[None, :] - cx) / scale - dx
    qy = (np.arange(h, dtype=np.float64)[:, None] - cy) / scale - dy
    sx = (rot[0, 0] * qx + rot[1, 0] * qy + cx).ravel()
    sy = (rot[0, 1] * qx + rot[1, 1] * qy + cy).ravel()
    # snap round-off so integer shifts stay exact
    sx = _snap(sx)
    sy = _snap(sy)

    out = np.empty_like(img)
    if circular:
        for ch in range(img.shape[0]):
            out[ch] = ndimage.map_coordinates(img[ch], [sy, sx], order=1, mode="grid-wrap").reshape(h, w)
    else:
        inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
        for ch in range(img.shape[0]):
            vals = ndimage.map_coordinates(img[ch], [sy, sx], order=1, mode="nearest").reshape(h, w)
            out[ch] = np.where(inside.reshape(h, w), vals, pad[ch])
    return out[0] if squeeze else out


def apply_transform(img, t: GeometricTransform, pad_source=None, circular: bool = False) -> np.ndarray:
    """Apply ``t`` to ``img``; uncovered pixels come from ``pad_source``."""
    img = np.asarray(img, dtype=np.float64)
    if pad_source is not None and np.shape(pad_source) != img.shape:
        raise ValueError("pad_source must match the image dimensions")
    return warp(img, t.dx, t.dy, t.theta_deg, t.scale, pad_source=pad_source, circular=circular)


def phase_ramp(u, v, dx: float, dy: float, stride: int, w: int, h: int):
    """Latent phase shift (radians) induced by a pixel translation."""
    return -2.0 * np.pi * (np.asarray(u) * dx / (stride * w) + np.asarray(v) * dy / (stride * h))


def phase_range(r_max: float, delta_norm: float, stride: int, w: int) -> float:
    return 4.0 * math.pi * r_max * delta_norm / (stride * w)


def coord_drift(r: float, theta_rad: float) -> float:
    if r < 0:
        raise ValueError("radius must be non-negative")
    return r * theta_rad


def expected_attenuation(alpha: float, coherence: float = 1.0) -> float:
    """``sin(alpha)/alpha * coherence`` with the alpha -> 0 limit."""
    if not 0.0 <= coherence <= 1.0:
        raise ValueError(f"coherence must lie in [0, 1], got {coherence}")
    if alpha == 0:
        return coherence
    return math.sin(alpha) / alpha * coherence


def estimate_coherence(measured_ratio: float, alpha: float) -> float:
    """Coherence implied by a measured attenuation ratio, clipped to [0, 1].

    Returns NaN where the sinc factor vanishes and the ratio carries no
    information about coordinate alignment.
    """
    sinc = expected_attenuation(alpha, 1.0)
    if abs(sinc) < 1e-6:
        return float("nan")
    return float(np.clip(measured_ratio / sinc, 0.0, 1.0))


def predict(delta_norm: float, theta_deg: float, r_max: float, stride: int, w: int,
            coherence: float = 1.0) -> PhasePrediction:
    rng = phase_range(r_max, delta_norm, stride, w)
    alpha = rng / 2
    return PhasePrediction(
        phase_range=rng,
        alpha=alpha,
        drift=coord_drift(r_max, math.radians(abs(theta_deg))),
        attenuation=expected_attenuation(alpha, coherence),
    )


def sample_micro_perturbation(bounds: PerturbationBounds, seed) -> GeometricTransform:
    rng = np.random.default_rng(seed)
    dx, dy = rng.uniform(-1.0, 1.0, size=2) * bounds.translation_px
    theta = rng.uniform(-1.0, 1.0) * bounds.rotation_deg
    scale = rng.uniform(bounds.scale_lo, bounds.scale_hi) if bounds.scale_hi > bounds.scale_lo else bounds.scale_lo
    return GeometricTransform(float(dx), float(dy), float(theta), float(scale))
