"""Fourier-ring watermarks on latent arrays.

A latent is a ``(c, h, w)`` float array. Spectra are DC-centered, unitary
(``norm="ortho"``) 2-D DFTs of a single channel, indexed ``[row, col]`` so a
frequency offset ``(u, v)`` lives at ``[h//2 + v, w//2 + u]`` (modulo size).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERMITIAN_TOL = 1e-6


class SymmetryError(ValueError):
    """Raised when a spectrum is not Hermitian-symmetric within tolerance."""


@dataclass(frozen=True)
class LatentGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"latent must have shape (c, h, w), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @classmethod
    def standard_normal(cls, c: int, h: int, w: int, seed) -> LatentGrid:
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((c, h, w)))


@dataclass(frozen=True)
class RingMask:
    """Annulus of centered frequency offsets carrying the key.

    ``coords`` holds every lattice point ``(u, v)`` with
    ``r_min <= |(u, v)| <= r_max`` in row-major order (v, then u).
    ``canonical`` flags one representative per conjugate pair; the mirror
    ``(-u, -v)`` of a canonical point is never canonical unless it is the
    point itself.
    """

    width: int
    height: int
    r_min: float
    r_max: float
    channel: int
    coords: np.ndarray
    canonical: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def canonical_coords(self) -> np.ndarray:
        return self.coords[self.canonical]

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Row/col array indices of every coordinate in a centered spectrum."""
        return _offset_to_index(self.coords, self.height, self.width)

    def mirror_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return _offset_to_index(-self.coords, self.height, self.width)


@dataclass(frozen=True)
class WatermarkKey:
    """Real key values, one per mask coordinate (mirrors share their value)."""

    values: np.ndarray
    seed: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("key values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class DetectionResult:
    distance: float
    verdict: bool
    threshold: float


def _offset_to_index(offsets: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    cols = (w // 2 + offsets[:, 0]) % w
    rows = (h // 2 + offsets[:, 1]) % h
    return rows, cols


def _check_finite_2d(channel) -> np.ndarray:
    a = np.asarray(channel, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError(f"expected a 2-D array of at least 2x2, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("input contains non-finite values")
    return a


def fft2_centered(channel) -> np.ndarray:
    """Unitary 2-D DFT with the DC term moved to ``(h//2, w//2)``."""
    a = _check_finite_2d(channel)
    return np.fft.fftshift(np.fft.fft2(a, norm="ortho"))


def hermitian_defect(spectrum: np.ndarray) -> float:
    """Largest ``|S(k) - conj(S(-k))|`` over the centered spectrum."""
    s = np.fft.ifftshift(np.asarray(spectrum))
    mirrored = np.conj(np.roll(s[::-1, ::-1], 1, axis=(0, 1)))
    return float(np.max(np.abs(s - mirrored))) if s.size else 0.0


def ifft2_centered(spectrum, tol: float = HERMITIAN_TOL) -> np.ndarray:
    """Inverse of :func:`fft2_centered`, returning the real part.

    Raises :class:`SymmetryError` if the spectrum is not Hermitian within
    ``tol``; otherwise the discarded imaginary part is pure round-off.
    """
    s = np.asarray(spectrum, dtype=np.complex128)
    defect = hermitian_defect(s)
    if defect > tol:
        raise SymmetryError(f"spectrum violates Hermitian symmetry by {defect:.3g} (tol {tol:g})")
    return np.fft.ifft2(np.fft.ifftshift(s), norm="ortho").real


def make_ring_mask(w: int, h: int, r_min: float, r_max: float, channel: int = 0) -> RingMask:
    if not 0 <= r_min < r_max:
        raise ValueError(f"need 0 <= r_min < r_max, got r_min={r_min}, r_max={r_max}")
    if r_max > min(w, h) / 2:
        raise ValueError(f"r_max={r_max} exceeds min(w, h)/2 = {min(w, h) / 2}")
    # offsets representable in a centered h x w spectrum
    us = np.arange(-(w // 2), w - w // 2)
    vs = np.arange(-(h // 2), h - h // 2)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    r2 = uu.astype(np.float64) ** 2 + vv.astype(np.float64) ** 2
    keep = (r2 >= r_min * r_min) & (r2 <= r_max * r_max)
    if not keep.any():
        raise ValueError(f"annulus r_min={r_min}, r_max={r_max} contains no lattice points")
    coords = np.stack([uu[keep], vv[keep]], axis=1)

    rows, cols = _offset_to_index(coords, h, w)
    mrows, mcols = _offset_to_index(-coords, h, w)
    flat = rows * w + cols
    mflat = mrows * w + mcols
    # canonical representative of each conjugate pair: the smaller flat index
    canonical = flat <= mflat
    coords.setflags(write=False)
    canonical.setflags(write=False)
    return RingMask(w, h, float(r_min), float(r_max), int(channel), coords, canonical)


def sample_key(mask: RingMask, seed: int) -> WatermarkKey:
    """Standard-normal key from a counter-based generator.

    Canonical coordinate ``k`` (in canonical order) draws from Philox with
    key ``seed`` and counter ``k``, so a value depends only on ``(seed, k)``.
    Mirror coordinates copy their partner's value, since the real part of a
    real signal's spectrum is even.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    canon_pos = np.flatnonzero(mask.canonical)
    canon_vals = np.empty(len(canon_pos))
    for k in range(len(canon_pos)):
        bitgen = np.random.Philox(key=seed, counter=[k, 0, 0, 0])
        canon_vals[k] = np.random.Generator(bitgen).standard_normal()

    rows, cols = mask.indices()
    flat = rows * mask.width + cols
    lookup = dict(zip(flat[canon_pos].tolist(), canon_vals.tolist()))
    mrows, mcols = mask.mirror_indices()
    mflat = mrows * mask.width + mcols
    values = np.array([lookup[f] if c else lookup[m] for f, m, c in zip(flat, mflat, mask.canonical)])
    return WatermarkKey(values, seed)


def _check_mask_fits(latent: LatentGrid, mask: RingMask, key: WatermarkKey | None = None):
    if mask.channel >= latent.channels:
        raise ValueError(f"mask channel {mask.channel} out of range for {latent.channels} channels")
    if (mask.height, mask.width) != (latent.height, latent.width):
        raise ValueError(
            f"mask geometry {mask.height}x{mask.width} does not match latent {latent.height}x{latent.width}"
        )
    if key is not None and len(key) != len(mask):
        raise ValueError(f"key has {len(key)} values for a mask of {len(mask)} coordinates")


def embed_key(latent: LatentGrid, mask: RingMask, key: WatermarkKey, mode: str = "real") -> LatentGrid:
    """Write the key into the masked channel's spectrum.

    ``mode="replace"`` sets each masked coefficient to ``eta + 0j``.
    ``mode="real"`` sets only the real part and keeps the existing imaginary
    part. Either way the mirror coefficient is the conjugate, so the latent
    stays real; a self-conjugate coordinate is necessarily real.
    """
    if mode not in ("replace", "real"):
        raise ValueError(f"unknown embed mode {mode!r}")
    _check_mask_fits(latent, mask, key)
    spec = fft2_centered(latent.values[mask.channel])
    rows, cols = mask.indices()
    mrows, mcols = mask.mirror_indices()
    eta = key.values
    if mode == "replace":
        new = eta.astype(np.complex128)
    else:
        new = eta + 1j * spec[rows, cols].imag
    canon = mask.canonical
    spec[rows[canon], cols[canon]] = new[canon]
    spec[mrows[canon], mcols[canon]] = np.conj(new[canon])
    self_conj = (rows == mrows) & (cols == mcols)
    spec[rows[self_conj], cols[self_conj]] = eta[self_conj]

    out = latent.values.copy()
    out[mask.channel] = ifft2_centered(spec)
    return LatentGrid(out)


def masked_coefficients(latent: LatentGrid, mask: RingMask, canonical_only: bool = True) -> np.ndarray:
    _check_mask_fits(latent, mask)
    spec = fft2_centered(latent.values[mask.channel])
    rows, cols = mask.indices()
    z = spec[rows, cols]
    return z[mask.canonical] if canonical_only else z


def detection_distance(latent: LatentGrid, mask: RingMask, key: WatermarkKey, complex_form: bool = False) -> float:
    """Mean ``|eta - Re(Z)|`` over canonical mask coordinates.

    With ``complex_form=True`` the full complex residual ``|eta - Z|`` is used.
    """
    _check_mask_fits(latent, mask, key)
    z = masked_coefficients(latent, mask)
    eta = key.values[mask.canonical]
    resid = eta - z if complex_form else eta - z.real
    return float(np.mean(np.abs(resid)))


def decide(d: float, tau: float) -> DetectionResult:
    if not tau > 0:
        raise ValueError(f"threshold must be positive, got {tau}")
    return DetectionResult(float(d), bool(d < tau), float(tau))


def bit_accuracy(latent: LatentGrid, mask: RingMask, key: WatermarkKey) -> float:
    """Fraction of canonical coordinates where ``sign(Re Z) == sign(eta)``."""
    _check_mask_fits(latent, mask, key)
    eta = key.values[mask.canonical]
    if np.any(eta == 0):
        raise ValueError("bit accuracy undefined for zero key values")
    z = masked_coefficients(latent, mask)
    return float(np.mean(np.sign(z.real) == np.sign(eta)))


def real_correlation(latent: LatentGrid, mask: RingMask, key: WatermarkKey) -> float:
    """Mean of ``eta * Re(Z)`` over canonical coordinates."""
    z = masked_coefficients(latent, mask)
    return float(np.mean(key.values[mask.canonical] * z.real))
