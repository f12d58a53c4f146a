"""Patch-level rasterization with overlap blending, and its analytic backward pass.

Every patch renders its own Gaussians over a ``(p + 2a)`` square extended
region. Overlapping border bands (width ``2a``) are merged with weights
linear in the distance to each patch's core; per axis the two contributing
weights sum to one, and 2-D weights are products of the per-axis ones.
Pixel value: ``sum_i c_i * alpha_i * exp(-m_i / 2)`` with ``m_i`` the squared
Mahalanobis distance, cut off where ``m_i > cutoff**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..metrics import FrequencyLossSpec, frequency_loss, frequency_loss_grad, l1_loss, l1_loss_grad
from .scene import GaussianScene

DEFAULT_CUTOFF = 3.0
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class LossSpec:
    l1_weight: float = 1.0
    freq: FrequencyLossSpec = field(default_factory=FrequencyLossSpec)

    def value(self, render: np.ndarray, target: np.ndarray) -> float:
        total = 0.0
        if self.l1_weight:
            total += self.l1_weight * l1_loss(render, target)
        if self.freq.weight:
            total += self.freq.weight * frequency_loss(render, target, self.freq)
        return total

    def grad(self, render: np.ndarray, target: np.ndarray) -> np.ndarray:
        g = np.zeros_like(render)
        if self.l1_weight:
            g += self.l1_weight * l1_loss_grad(render, target)
        if self.freq.weight:
            g += self.freq.weight * frequency_loss_grad(render, target, self.freq)
        return g


@dataclass
class GradientSet:
    """Loss partials per Gaussian, aligned with the scene's storage order."""

    bias_raw: np.ndarray  # (N, 2)
    log_scale: np.ndarray  # (N, 2): d/d log l11, d/d log l22
    l21: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)

    def as_chol_raw(self) -> np.ndarray:
        return np.stack([self.log_scale[:, 0], self.l21, self.log_scale[:, 1]], axis=1)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.bias_raw, self.log_scale, self.l21[:, None], self.color,
                               self.opacity[:, None]], axis=1)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


def axis_blend_weights(n_pixels: int, patch_size: int, margin: int) -> np.ndarray:
    """``(n_patches, p + 2a)`` weights of each patch over its extended span.

    Zero outside the image; one in the core and on image-edge sides.
    """
    p, a = patch_size, margin
    n = n_pixels // p
    k = np.arange(p + 2 * a)
    out = np.zeros((n, p + 2 * a))
    for i in range(n):
        x0 = i * p
        x = x0 - a + k
        w = np.ones_like(x, dtype=np.float64)
        if a > 0:
            left = x < x0 + a
            right = x >= x0 + p - a
            if i > 0:
                w = np.where(left, (x + 0.5 - (x0 - a)) / (2 * a), w)
            if i < n - 1:
                w = np.where(right, (x0 + p + a - (x + 0.5)) / (2 * a), w)
        w = np.where((x < 0) | (x >= n_pixels), 0.0, w)
        out[i] = w
    return out


def moving_axis_weights(x: np.ndarray, start: np.ndarray, patch_size: int, margin: int,
                        first: np.ndarray, last: np.ndarray) -> np.ndarray:
    """Blend weight at pixel positions ``x`` for windows whose core begins at ``start``.

    Continuous in ``start``; at integer starts it matches
    :func:`axis_blend_weights` without the image clip.
    """
    p, a = patch_size, margin
    t = x - start
    inside = (t >= -a - 0.5) & (t < p + a - 0.5)
    w = np.ones_like(t)
    if a > 0:
        left = np.clip((t + 0.5 + a) / (2 * a), 0.0, 1.0)
        right = np.clip((p + a - 0.5 - t) / (2 * a), 0.0, 1.0)
        w = np.where(first, 1.0, left) * np.where(last, 1.0, right)
    return np.where(inside, w, 0.0)


class PatchLayout:
    """Index bookkeeping shared by the forward and backward passes."""

    def __init__(self, scene: GaussianScene):
        p, a = scene.patch_size, scene.margin
        rows, cols = scene.patch_grid
        e = p + 2 * a
        self.n_patches = rows * cols
        counts = np.bincount(scene.patch, minlength=self.n_patches)
        self.slots = int(counts.max()) if counts.size and scene.n_gaussians else 0
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        # slot_index[P, s] -> Gaussian index or -1
        self.slot_index = np.full((self.n_patches, max(self.slots, 1)), -1, dtype=np.int64)
        if scene.n_gaussians:
            within = np.arange(scene.n_gaussians) - starts[scene.patch]
            self.slot_index[scene.patch, within] = np.arange(scene.n_gaussians)
        self.valid = self.slot_index >= 0

        pr, pc = np.divmod(np.arange(self.n_patches), cols)
        self.moved = scene.window_offset is not None
        if self.moved:
            # one extra pixel per axis covers a fractional window position
            off = scene.window_offset
            k = np.arange(e + 1)
            ys = pr[:, None] * p - a + np.floor(off[:, 1:2]) + k[None, :]
            xs = pc[:, None] * p - a + np.floor(off[:, 0:1]) + k[None, :]
            wy = moving_axis_weights(ys, pr[:, None] * p + off[:, 1:2], p, a,
                                     (pr == 0)[:, None], (pr == rows - 1)[:, None])
            wx = moving_axis_weights(xs, pc[:, None] * p + off[:, 0:1], p, a,
                                     (pc == 0)[:, None], (pc == cols - 1)[:, None])
            e = e + 1
        else:
            k = np.arange(e)
            ys = pr[:, None] * p - a + k[None, :]  # (P, e)
            xs = pc[:, None] * p - a + k[None, :]
            wy = axis_blend_weights(scene.height, p, a)[pr]  # (P, e)
            wx = axis_blend_weights(scene.width, p, a)[pc]
        self.px = np.broadcast_to(xs[:, None, :], (self.n_patches, e, e)).reshape(self.n_patches, -1).astype(np.float64)
        self.py = np.broadcast_to(ys[:, :, None], (self.n_patches, e, e)).reshape(self.n_patches, -1).astype(np.float64)
        inside = ((self.px >= 0) & (self.px < scene.width) & (self.py >= 0) & (self.py < scene.height))
        self.weight = (wy[:, :, None] * wx[:, None, :]).reshape(self.n_patches, -1)
        self.weight = np.where(inside, self.weight, 0.0)
        flat = np.clip(self.py, 0, scene.height - 1).astype(np.int64) * scene.width + np.clip(self.px, 0, scene.width - 1).astype(np.int64)
        self.flat = np.where(inside, flat, 0)
        self.height, self.width = scene.height, scene.width

    def gather(self, values: np.ndarray, fill=0.0) -> np.ndarray:
        idx = np.where(self.valid, self.slot_index, 0)
        out = values[idx]
        mask = self.valid.reshape(self.valid.shape + (1,) * (values.ndim - 1))
        return np.where(mask, out, fill)

    def total_weight(self) -> np.ndarray:
        return np.bincount(self.flat.ravel(), weights=self.weight.ravel(),
                           minlength=self.height * self.width).reshape(self.height, self.width)

    def scatter(self, patch_values: np.ndarray) -> np.ndarray:
        """Weighted merge of ``(P, K, C)`` patch renders into ``(C, H, W)``.

        Moved windows no longer tile the image, so their merge is divided by
        the summed weight; pixels no window reaches are left at zero.
        """
        n_ch = patch_values.shape[-1]
        flat = self.flat.ravel()
        w = self.weight.ravel()
        out = np.empty((n_ch, self.height * self.width))
        for c in range(n_ch):
            out[c] = np.bincount(flat, weights=w * patch_values[..., c].ravel(), minlength=self.height * self.width)
        out = out.reshape(n_ch, self.height, self.width)
        if self.moved:
            total = self.total_weight()
            out = np.where(total > 0, out / np.where(total > 0, total, 1.0), 0.0)
        return out


def _singular(chol: np.ndarray) -> np.ndarray:
    l11, l21, l22 = chol[..., 0], chol[..., 1], chol[..., 2]
    s11 = l11 ** 2
    s22 = l21 ** 2 + l22 ** 2
    tr = s11 + s22
    det = (l11 * l22) ** 2
    disc = np.sqrt(np.maximum(tr ** 2 / 4 - det, 0.0))
    lo = tr / 2 - disc
    hi = tr / 2 + disc
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / lo, np.inf)
    return ~(cond <= MAX_CONDITION) | ~np.isfinite(chol).all(axis=-1)


def _evaluate(px, py, mu, chol, cutoff):
    """Gaussian values and intermediates, broadcasting ``(P, S, 1)`` params over ``(P, 1, K)`` pixels."""
    l11, l21, l22 = chol[..., 0:1], chol[..., 1:2], chol[..., 2:3]
    dx = px - mu[..., 0:1]
    dy = py - mu[..., 1:2]
    e1 = dx / l11
    e2 = (dy - l21 * e1) / l22
    m = e1 * e1 + e2 * e2
    g = np.exp(-0.5 * m)
    if cutoff is not None:
        g = np.where(m <= cutoff * cutoff, g, 0.0)
    return g, e1, e2


def _patch_forward(scene: GaussianScene, layout: PatchLayout, cutoff):
    mu = layout.gather(scene.means())
    chol = layout.gather(scene.cholesky(), fill=1.0)
    amp = layout.gather(scene.color * scene.opacity[:, None])  # (P, S, 3)
    singular = _singular(chol) & layout.valid
    live = layout.valid & ~singular
    chol = np.where(live[..., None], chol, 1.0)
    g, e1, e2 = _evaluate(layout.px[:, None, :], layout.py[:, None, :], mu, chol, cutoff)
    g = np.where(live[..., None], g, 0.0)
    patch_img = np.einsum("psk,psc->pkc", g, amp)
    return patch_img, g, e1, e2, mu, chol, amp, int(singular.sum())


def rasterize(scene: GaussianScene, cutoff: float | None = DEFAULT_CUTOFF) -> np.ndarray:
    """Render ``(3, H, W)``; values are not clamped.

    Gaussians whose covariance condition number exceeds 1e12 contribute
    nothing and are counted in ``scene.diagnostics["singular"]``.
    """
    layout = PatchLayout(scene)
    patch_img, *_, n_sing = _patch_forward(scene, layout, cutoff)
    scene.diagnostics["singular"] = n_sing
    if layout.moved:
        scene.diagnostics["uncovered"] = int(np.sum(layout.total_weight() <= 0))
    return layout.scatter(patch_img)


def coverage(scene: GaussianScene) -> np.ndarray:
    """Boolean ``(H, W)`` map of pixels reached by at least one render window."""
    return PatchLayout(scene).total_weight() > 0


def rasterize_global(scene: GaussianScene, cutoff: float | None = DEFAULT_CUTOFF) -> np.ndarray:
    """Render all Gaussians over the whole image, ignoring patches."""
    h, w = scene.height, scene.width
    yy, xx = np.mgrid[0:h, 0:w]
    px = xx.ravel()[None, :].astype(np.float64)
    py = yy.ravel()[None, :].astype(np.float64)
    chol = scene.cholesky()
    live = ~_singular(chol)
    chol = np.where(live[:, None], chol, 1.0)
    out = np.zeros((3, h * w))
    mu = scene.means()
    amp = scene.color * scene.opacity[:, None]
    for start in range(0, scene.n_gaussians, 256):
        sl = slice(start, start + 256)
        g, _, _ = _evaluate(px, py, mu[sl], chol[sl], cutoff)
        g = np.where(live[sl, None], g, 0.0)
        out += amp[sl].T @ g
    return out.reshape(3, h, w)


def rasterize_with_grads(scene: GaussianScene, target: np.ndarray, loss_spec: LossSpec = LossSpec(),
                         cutoff: float | None = DEFAULT_CUTOFF) -> tuple[np.ndarray, float, GradientSet]:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (3, scene.height, scene.width):
        raise ValueError(f"target shape {target.shape} does not match scene (3, {scene.height}, {scene.width})")
    if scene.window_offset is not None:
        raise ValueError("gradients are only defined on the fixed patch grid; fit before perturbing")
    layout = PatchLayout(scene)
    patch_img, g, e1, e2, mu, chol, amp, n_sing = _patch_forward(scene, layout, cutoff)
    scene.diagnostics["singular"] = n_sing
    render = layout.scatter(patch_img)
    loss = loss_spec.value(render, target)
    g_img = loss_spec.grad(render, target).reshape(3, -1)

    # dL/d(patch pixel) = blend weight * dL/d(image pixel)
    g_patch = g_img[:, layout.flat].transpose(1, 2, 0) * layout.weight[..., None]  # (P, K, 3)
    a_sum = np.einsum("psk,pkc->psc", g, g_patch)  # sum_k g * dL/dI_c
    s = np.einsum("psc,pkc->psk", amp, g_patch)  # dL/dg
    q = -0.5 * s * g  # dL/dm

    l11, l21, l22 = chol[..., 0:1], chol[..., 1:2], chol[..., 2:3]
    dm_ddx = 2 * e1 / l11 - 2 * e2 * l21 / (l22 * l11)
    dm_ddy = 2 * e2 / l22
    g_mux = -np.sum(q * dm_ddx, axis=-1)
    g_muy = -np.sum(q * dm_ddy, axis=-1)
    g_s1 = np.sum(q * (-2 * e1 * e1 + 2 * e2 * e1 * l21 / l22), axis=-1)
    g_l21 = np.sum(q * (-2 * e1 * e2 / l22), axis=-1)
    g_s2 = np.sum(q * (-2 * e2 * e2), axis=-1)

    n = scene.n_gaussians
    sel = layout.valid
    idx = layout.slot_index[sel]

    def unslot(arr):
        out = np.zeros((n,) + arr.shape[2:])
        out[idx] = arr[sel]
        return out

    opacity = scene.opacity
    color = scene.color
    a_sum_n = unslot(a_sum)
    tanh_b = np.tanh(scene.bias_raw)
    dmu_db = scene.beta * (1.0 - tanh_b ** 2)
    grads = GradientSet(
        bias_raw=np.stack([unslot(g_mux), unslot(g_muy)], axis=1) * dmu_db,
        log_scale=np.stack([unslot(g_s1), unslot(g_s2)], axis=1),
        l21=unslot(g_l21),
        color=a_sum_n * opacity[:, None],
        opacity=np.sum(a_sum_n * color, axis=1),
    )
    return render, loss, grads
