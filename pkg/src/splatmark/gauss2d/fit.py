"""Direct per-image fitting of a Gaussian scene with Adam."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import DEFAULT_CUTOFF, GradientSet, LossSpec, rasterize_with_grads
from .scene import GaussianScene

PARAMS = ("bias_raw", "chol_raw", "color", "opacity")


class FittingError(RuntimeError):
    def __init__(self, iteration: int, trace: list[float]):
        super().__init__(f"non-finite loss or gradient at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, cfg: OptimizerConfig = OptimizerConfig()):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            params[k] -= c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


def _as_dict(grads: GradientSet) -> dict[str, np.ndarray]:
    return {
        "bias_raw": grads.bias_raw,
        "chol_raw": grads.as_chol_raw(),
        "color": grads.color,
        "opacity": grads.opacity,
    }


def fit(scene: GaussianScene, target, optimizer: OptimizerConfig = OptimizerConfig(), iterations: int = 1000,
        loss_spec: LossSpec = LossSpec(), cutoff: float | None = DEFAULT_CUTOFF,
        callback=None) -> tuple[GaussianScene, list[float]]:
    """Fit ``scene`` to ``target``; returns the fitted copy and per-iteration losses.

    ``trace[i]`` is the loss of the scene before update ``i``. Colors are
    projected back to [0, 1] after every step. Raises :class:`FittingError`
    on a non-finite loss or gradient.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    out = scene.copy()
    params = {k: getattr(out, k) for k in PARAMS}
    opt = Adam(optimizer)
    trace: list[float] = []
    for it in range(iterations):
        _, loss, grads = rasterize_with_grads(out, target, loss_spec, cutoff)
        if not np.isfinite(loss) or not grads.all_finite():
            raise FittingError(it, trace)
        trace.append(float(loss))
        opt.step(params, _as_dict(grads))
        np.clip(out.color, 0.0, 1.0, out=out.color)
        if callback is not None:
            callback(it, loss, out)
    return out, trace
