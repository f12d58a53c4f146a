"""Image losses and detection metrics.

Images are ``(C, H, W)`` or ``(H, W)`` float arrays with unit peak.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PSNR_CAP_DB = 99.0
_MSE_FLOOR = 1e-10


@dataclass(frozen=True)
class FrequencyLossSpec:
    gamma: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.weight < 0:
            raise ValueError("frequency loss weight must be non-negative")


@dataclass(frozen=True)
class RocInput:
    clean: Sequence[float]
    watermarked: Sequence[float]
    target_fpr: float = 0.01

    def __post_init__(self):
        clean = np.asarray(self.clean, dtype=np.float64)
        wm = np.asarray(self.watermarked, dtype=np.float64)
        if clean.size == 0 or wm.size == 0:
            raise ValueError("score lists must be non-empty")
        if not (np.all(np.isfinite(clean)) and np.all(np.isfinite(wm))):
            raise ValueError("scores must be finite")
        if np.any(clean < 0) or np.any(wm < 0):
            raise ValueError("scores must be non-negative")
        if not 0 < self.target_fpr < 1:
            raise ValueError("target FPR must lie in (0, 1)")
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "watermarked", wm)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _channels(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 2 else a


def l1_loss(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_loss_grad(a, b) -> np.ndarray:
    """Sub-gradient of :func:`l1_loss` with respect to ``a`` (0 at kinks)."""
    a, b = _pair(a, b)
    return np.sign(a - b) / a.size


def frequency_loss(a, b, spec: FrequencyLossSpec = FrequencyLossSpec()) -> float:
    """Mean ``|F(a) - F(b)|**gamma`` over frequencies, averaged over channels."""
    a, b = _pair(a, b)
    d = np.fft.fft2(_channels(a) - _channels(b), norm="ortho")
    return float(np.mean(np.abs(d) ** spec.gamma))


def frequency_loss_grad(a, b, spec: FrequencyLossSpec = FrequencyLossSpec()) -> np.ndarray:
    a, b = _pair(a, b)
    d = np.fft.fft2(_channels(a) - _channels(b), norm="ortho")
    mag = np.abs(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(mag > 0, spec.gamma * mag ** (spec.gamma - 2.0), 0.0)
    g = np.fft.ifft2(coef * d, norm="ortho").real / d.size
    return g.reshape(a.shape)


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)))


def _psnr_from_mse(mse: float) -> float:
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _interior(a: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return a
    return a[..., r:-r, r:-r]


def aligned_psnr(a, b, radius: int) -> tuple[float, tuple[int, int]]:
    """Best PSNR of ``b`` after undoing a circular displacement ``(dy, dx)``, ``|dy|, |dx| <= radius``.

    Scored on the interior of ``a`` excluding a ``radius``-pixel border.
    Candidates are ranked by FFT correlation, then the near-best ones are
    re-scored directly; ties go to the smallest shift norm, then row-major.
    Returns ``(psnr_db, (dy, dx))``: ``b`` looks like ``a`` moved by
    ``(dy, dx)``, so ``roll(b, (-dy, -dx))`` aligns to ``a``.
    """
    if radius < 0:
        raise ValueError("search radius must be non-negative")
    a, b = _pair(a, b)
    a3, b3 = _channels(a), _channels(b)
    _, h, w = a3.shape
    if 2 * radius >= min(h, w):
        raise ValueError("search radius leaves no interior")
    if radius == 0:
        return psnr(_interior(a3, 0), _interior(b3, 0)), (0, 0)

    mask = np.zeros((h, w))
    mask[radius:h - radius, radius:w - radius] = 1.0
    n = mask.sum() * a3.shape[0]
    fm = np.fft.rfft2(mask)
    # sum over interior x of (a(x) - b(x - s))^2 for every circular shift s
    a_term = np.sum(mask * a3 ** 2)
    b_term = np.fft.irfft2(fm * np.conj(np.fft.rfft2(np.sum(b3 ** 2, axis=0))), s=(h, w))
    cross = np.zeros((h, w))
    for ch in range(a3.shape[0]):
        cross += np.fft.irfft2(np.fft.rfft2(mask * a3[ch]) * np.conj(np.fft.rfft2(b3[ch])), s=(h, w))
    # correlation index k corresponds to b rolled by +k
    sse = a_term + b_term - 2.0 * cross

    cands = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            cands.append((sse[-dy % h, -dx % w], dy, dx))
    best = min(c[0] for c in cands)
    slack = 1e-9 * max(1.0, abs(a_term)) + 1e-12
    near = [(dy, dx) for s, dy, dx in cands if s <= best + slack + 1e-6 * abs(best)]

    def exact(shift):
        rolled = np.roll(b3, (-shift[0], -shift[1]), axis=(1, 2))
        diff = _interior(a3 - rolled, radius)
        return float(np.sum(diff ** 2)) / n

    scored = [(exact(s), s) for s in near]
    min_mse = min(m for m, _ in scored)
    tied = [s for m, s in scored if m <= min_mse + max(1e-15, 1e-12 * min_mse)]
    tied.sort(key=lambda s: (s[0] ** 2 + s[1] ** 2, s[0], s[1]))
    shift = tied[0]
    mse = dict((s, m) for m, s in scored)[shift]
    return _psnr_from_mse(mse), shift


def tpr_at_fpr(roc: RocInput) -> float:
    """TPR with threshold at the ``ceil(fpr * n)``-th smallest clean score.

    A watermarked score counts as detected when strictly below the threshold.
    """
    clean = np.sort(roc.clean)
    k = max(1, math.ceil(roc.target_fpr * clean.size - 1e-9))
    tau = clean[k - 1]
    return float(np.mean(roc.watermarked < tau))


def write_metric_csv(path, rows: Iterable[tuple[int, str, float]]) -> Path:
    """Write ``trial_id, metric_name, value`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_id", "metric_name", "value"])
        for trial_id, name, value in rows:
            writer.writerow([int(trial_id), name, repr(float(value))])
    return path
