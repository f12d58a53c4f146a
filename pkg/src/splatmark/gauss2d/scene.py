"""Patch-organized 2D Gaussian scenes.

Each Gaussian stores an immutable anchor ``mu_fix`` plus a raw offset; its
effective mean is ``mu_fix + beta * tanh(bias_raw)``. The Cholesky factor
``L = [[l11, 0], [l21, l22]]`` is stored as ``(log l11, l21, log l22)``.
Coordinates are continuous ``(x, y)`` with pixel ``(row i, col j)`` centered
at ``(j, i)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..geometry import GeometricTransform, forward_map, rotation_matrix

SCENE_MAGIC = b"GMS1"
WINDOW_MAGIC = b"WOFF"
RECORD_FIELDS = 12
_TANH_LIMIT = 1.0 - 1e-9


@dataclass
class GaussianScene:
    height: int
    width: int
    patch_size: int
    margin: int
    n_patch: int
    beta: float
    patch: np.ndarray  # (N,) patch id, row-major over the patch grid
    mu_fix: np.ndarray  # (N, 2)
    bias_raw: np.ndarray  # (N, 2)
    chol_raw: np.ndarray  # (N, 3) log l11, l21, log l22
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    window_offset: np.ndarray | None = None  # (P, 2) render-window displacement, None = fixed grid
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        check_scene(self)

    @property
    def n_gaussians(self) -> int:
        return len(self.patch)

    @property
    def patch_grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def n_patches(self) -> int:
        rows, cols = self.patch_grid
        return rows * cols

    def means(self) -> np.ndarray:
        return self.mu_fix + self.beta * np.tanh(self.bias_raw)

    def cholesky(self) -> np.ndarray:
        """``(N, 3)`` array of ``(l11, l21, l22)``."""
        c = self.chol_raw
        return np.stack([np.exp(c[:, 0]), c[:, 1], np.exp(c[:, 2])], axis=1)

    def copy(self) -> GaussianScene:
        return replace(
            self,
            patch=self.patch.copy(),
            mu_fix=self.mu_fix.copy(),
            bias_raw=self.bias_raw.copy(),
            chol_raw=self.chol_raw.copy(),
            color=self.color.copy(),
            opacity=self.opacity.copy(),
            window_offset=None if self.window_offset is None else self.window_offset.copy(),
            diagnostics=dict(self.diagnostics),
        )

    def config(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "patch_size": self.patch_size,
            "margin": self.margin,
            "n_patch": self.n_patch,
            "beta_px": self.beta,
            "n_gaussians": self.n_gaussians,
        }


def check_scene(s: GaussianScene) -> None:
    p, a = s.patch_size, s.margin
    if p < 1 or s.height < 1 or s.width < 1:
        raise ValueError("image and patch sizes must be positive")
    if s.height % p or s.width % p:
        raise ValueError(f"image {s.height}x{s.width} is not divisible by patch size {p}")
    if a < 0 or 2 * a >= p:
        raise ValueError(f"margin must satisfy 0 <= 2a < p (a={a}, p={p})")
    if not s.beta > 0:
        raise ValueError("mean offset bound beta must be positive")
    n = len(s.patch)
    shapes = {"mu_fix": (n, 2), "bias_raw": (n, 2), "chol_raw": (n, 3), "color": (n, 3), "opacity": (n,)}
    for name, shape in shapes.items():
        if getattr(s, name).shape != shape:
            raise ValueError(f"{name} has shape {getattr(s, name).shape}, expected {shape}")
    rows, cols = s.height // p, s.width // p
    if s.window_offset is not None and s.window_offset.shape != (rows * cols, 2):
        raise ValueError(f"window_offset has shape {s.window_offset.shape}, expected {(rows * cols, 2)}")
    if n == 0:
        return
    if s.patch.min() < 0 or s.patch.max() >= rows * cols:
        raise ValueError("patch index out of range")
    if np.any(np.diff(s.patch) < 0):
        raise ValueError("Gaussians must be stored in patch-major order")
    pr, pc = np.divmod(s.patch, cols)
    x, y = s.mu_fix[:, 0], s.mu_fix[:, 1]
    if s.window_offset is not None:
        x = x - s.window_offset[s.patch, 0]
        y = y - s.window_offset[s.patch, 1]
    # extended region in continuous coordinates; unbounded on image-edge sides
    lo_x = np.where(pc == 0, -np.inf, pc * p - a - 0.5)
    hi_x = np.where(pc == cols - 1, np.inf, (pc + 1) * p + a - 0.5)
    lo_y = np.where(pr == 0, -np.inf, pr * p - a - 0.5)
    hi_y = np.where(pr == rows - 1, np.inf, (pr + 1) * p + a - 0.5)
    outside = (x < lo_x) | (x > hi_x) | (y < lo_y) | (y > hi_y)
    if outside.any():
        raise ValueError(f"{int(outside.sum())} anchors lie outside their patch's extended region")


def init_scene(height: int, width: int, patch_size: int = 16, margin: int = 2, n_patch: int = 64,
               seed: int = 0, beta: float | None = None, opacity: float = 0.1,
               jitter: float = 0.0) -> GaussianScene:
    """Uniform anchor lattice per patch, zero offsets, isotropic covariances.

    ``n_patch`` must be a perfect square. The covariance scale and the
    default ``beta`` are half the lattice spacing. ``jitter`` adds seeded
    uniform noise of that amplitude to the colors (0 keeps them mid-gray).
    """
    if height % patch_size or width % patch_size:
        raise ValueError(f"image {height}x{width} is not divisible by patch size {patch_size}")
    if margin < 0 or 2 * margin >= patch_size:
        raise ValueError(f"margin must satisfy 0 <= 2a < p (a={margin}, p={patch_size})")
    k = math.isqrt(n_patch)
    if k * k != n_patch or k < 1:
        raise ValueError(f"n_patch must be a positive perfect square, got {n_patch}")
    spacing = patch_size / k
    rows, cols = height // patch_size, width // patch_size
    local = (np.arange(k) + 0.5) * spacing - 0.5
    ly, lx = np.meshgrid(local, local, indexing="ij")
    lx, ly = lx.ravel(), ly.ravel()

    patch_ids = np.repeat(np.arange(rows * cols), n_patch)
    pr, pc = np.divmod(patch_ids, cols)
    mu_fix = np.stack([np.tile(lx, rows * cols) + pc * patch_size,
                       np.tile(ly, rows * cols) + pr * patch_size], axis=1)
    n = len(patch_ids)
    log_s = math.log(spacing / 2)
    chol = np.tile([log_s, 0.0, log_s], (n, 1))
    color = np.full((n, 3), 0.5)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        color = np.clip(color + rng.uniform(-jitter, jitter, size=color.shape), 0.0, 1.0)
    return GaussianScene(
        height=height, width=width, patch_size=patch_size, margin=margin, n_patch=n_patch,
        beta=float(spacing / 2 if beta is None else beta),
        patch=patch_ids, mu_fix=mu_fix, bias_raw=np.zeros((n, 2)), chol_raw=chol,
        color=color, opacity=np.full(n, float(opacity)),
    )


def _cholesky_2x2(sigma: np.ndarray) -> np.ndarray:
    """Batched ``(l11, l21, l22)`` of SPD ``(N, 2, 2)`` matrices."""
    l11 = np.sqrt(sigma[:, 0, 0])
    l21 = sigma[:, 1, 0] / l11
    l22 = np.sqrt(np.maximum(sigma[:, 1, 1] - l21 ** 2, 1e-300))
    return np.stack([l11, l21, l22], axis=1)


def patch_centers(scene: GaussianScene) -> np.ndarray:
    """``(P, 2)`` continuous centers of the fixed patch grid."""
    rows, cols = scene.patch_grid
    pr, pc = np.divmod(np.arange(rows * cols), cols)
    p = scene.patch_size
    return np.stack([(pc + 0.5) * p - 0.5, (pr + 0.5) * p - 0.5], axis=1).astype(np.float64)


def perturb_means(scene: GaussianScene, t: GeometricTransform) -> GaussianScene:
    """Move every Gaussian through ``t`` and co-rotate its covariance.

    Anchors are carried by ``t``; the offset from the anchor is rotated and
    scaled, then re-encoded through ``atanh``. Offsets that would exceed
    ``beta`` are clamped and counted in ``diagnostics["clamped"]``. Each
    patch keeps its Gaussians and its render window moves with the patch
    center, so the fitted Gaussians keep covering the pixels they were fitted
    to.
    """
    if t.is_identity:
        out = scene.copy()
        out.diagnostics["clamped"] = 0
        return out
    shape = (scene.height, scene.width)
    clamped = 0
    if t.theta_deg == 0 and t.scale == 1:
        # pure translations leave offsets and covariances untouched
        shift = np.array([t.dx, t.dy])
        anchors = scene.mu_fix + shift
        bias = scene.bias_raw.copy()
        chol = scene.chol_raw.copy()
    else:
        anchors = forward_map(scene.mu_fix, t, shape)
        rot = rotation_matrix(t.theta_deg)
        offset = scene.beta * np.tanh(scene.bias_raw)
        new_offset = t.scale * offset @ rot.T
        frac = new_offset / scene.beta
        over = np.abs(frac) > _TANH_LIMIT
        clamped = int(np.any(over, axis=1).sum())
        frac = np.clip(frac, -_TANH_LIMIT, _TANH_LIMIT)
        bias = np.arctanh(frac)
        lc = scene.cholesky()
        L = np.zeros((scene.n_gaussians, 2, 2))
        L[:, 0, 0], L[:, 1, 0], L[:, 1, 1] = lc[:, 0], lc[:, 1], lc[:, 2]
        RL = rot @ L
        new = _cholesky_2x2(RL @ RL.transpose(0, 2, 1))
        chol = np.stack([np.log(new[:, 0]), new[:, 1], np.log(new[:, 2])], axis=1)

    centers = patch_centers(scene)
    old = np.zeros_like(centers) if scene.window_offset is None else scene.window_offset
    window = forward_map(centers + old, t, shape) - centers
    out = GaussianScene(
        height=scene.height, width=scene.width, patch_size=scene.patch_size, margin=scene.margin,
        n_patch=scene.n_patch, beta=scene.beta, patch=scene.patch.copy(), mu_fix=anchors,
        bias_raw=bias, chol_raw=chol, color=scene.color.copy(), opacity=scene.opacity.copy(),
        window_offset=window,
    )
    out.diagnostics["clamped"] = clamped
    return out


def save_scene(scene: GaussianScene, path) -> Path:
    """Binary layout: ``GMS1``, u32 p, a, n_patch, H, W, N, f64 beta, then N records
    of 12 little-endian float32 values (anchor xy, offset xy, Cholesky raw x3,
    color rgb, opacity, patch id) in patch-major order. A perturbed scene
    appends ``WOFF`` and ``P`` float64 pairs of window offsets."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rec = np.concatenate(
        [scene.mu_fix, scene.bias_raw, scene.chol_raw, scene.color,
         scene.opacity[:, None], scene.patch[:, None].astype(np.float64)], axis=1,
    ).astype("<f4")
    header = struct.pack("<6Id", scene.patch_size, scene.margin, scene.n_patch,
                         scene.height, scene.width, scene.n_gaussians, scene.beta)
    trailer = b""
    if scene.window_offset is not None:
        trailer = WINDOW_MAGIC + scene.window_offset.astype("<f8").tobytes()
    path.write_bytes(SCENE_MAGIC + header + rec.tobytes() + trailer)
    return path


def load_scene(path) -> GaussianScene:
    data = Path(path).read_bytes()
    if data[:4] != SCENE_MAGIC:
        raise ValueError(f"{path}: not a scene file (bad magic)")
    hsize = struct.calcsize("<6Id")
    p, a, n_patch, h, w, n, beta = struct.unpack("<6Id", data[4:4 + hsize])
    body = data[4 + hsize:]
    window = None
    rec_bytes = n * RECORD_FIELDS * 4
    if len(body) > rec_bytes and body[rec_bytes:rec_bytes + 4] == WINDOW_MAGIC:
        window = np.frombuffer(body[rec_bytes + 4:], dtype="<f8").astype(np.float64).reshape(-1, 2)
        body = body[:rec_bytes]
    rec = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if rec.size != n * RECORD_FIELDS:
        raise ValueError(f"{path}: expected {n} records, found {rec.size / RECORD_FIELDS:g}")
    rec = rec.reshape(n, RECORD_FIELDS)
    return GaussianScene(
        height=h, width=w, patch_size=p, margin=a, n_patch=n_patch, beta=beta,
        patch=np.rint(rec[:, 11]).astype(np.int64), mu_fix=rec[:, 0:2].copy(),
        bias_raw=rec[:, 2:4].copy(), chol_raw=rec[:, 4:7].copy(), color=rec[:, 7:10].copy(),
        opacity=rec[:, 10].copy(), window_offset=window,
    )
