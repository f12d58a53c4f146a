"""Experiment orchestration: attack/detect sweeps and the Gaussian re-render removal run.

Sweeps push latents through decode -> attack -> encode and score them against
the key. Only the masked channel is simulated: the surrogate acts on each
channel independently, so the other channels cannot change any score.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import geometry as geo
from .gauss2d import LossSpec, OptimizerConfig, coverage, fit, init_scene, perturb_means, rasterize
from .metrics import FrequencyLossSpec, RocInput, aligned_psnr, psnr, tpr_at_fpr
from .spectral import (
    LatentGrid,
    RingMask,
    WatermarkKey,
    bit_accuracy,
    decide,
    detection_distance,
    embed_key,
    fft2_centered,
    make_ring_mask,
    real_correlation,
    sample_key,
)
from .surrogate import SurrogateConfig, decode_upsample, encode_downsample

CSV_COLUMNS = (
    "cell", "translation_px", "rotation_deg", "dx_px", "dy_px", "trials",
    "mean_d", "std_d", "mean_d_clean", "std_d_clean", "tpr_at_fpr", "target_fpr",
    "detect_rate", "bit_accuracy", "mean_corr", "corr_ratio",
    "r_max", "stride", "latent_width",
    "phase_range_rad", "alpha_rad", "coord_drift", "expected_attenuation", "coherence_est",
    "raw_psnr_db", "aligned_psnr_db", "aligned_shift_y", "aligned_shift_x",
)


class NumericalError(RuntimeError):
    """A measurement came out non-finite; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _from_mapping(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class TrialConfig:
    latent_width: int = 64
    latent_height: int = 64
    latent_channels: int = 4
    stride: int = 8
    kernel_sigma_px: float | None = None
    kernel_radius_px: int | None = None
    boundary: str = "circular"
    r_min: float = 4.0
    r_max: float = 16.0
    mask_channel: int = 0
    key_seed: int = 0
    embed_mode: str = "real"
    translation_px: tuple = (0.0, 2.0, 4.0, 8.0)
    rotation_deg: tuple = (0.0,)
    translation_direction_deg: float = 0.0
    trials: int = 200
    tau: float = 0.5
    target_fpr: float = 0.01
    display_scale: float = 0.15
    psnr_trials: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "translation_px", tuple(float(x) for x in self.translation_px))
        object.__setattr__(self, "rotation_deg", tuple(float(x) for x in self.rotation_deg))
        object.__setattr__(self, "r_min", float(self.r_min))
        object.__setattr__(self, "r_max", float(self.r_max))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= self.mask_channel < self.latent_channels:
            raise ValueError(f"mask_channel {self.mask_channel} out of range for {self.latent_channels} channels")
        if any(abs(t) > geo.MAX_ROTATION_DEG for t in self.rotation_deg):
            raise ValueError(f"rotations must satisfy |theta| <= {geo.MAX_ROTATION_DEG} degrees")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.target_fpr < 1:
            raise ValueError("target_fpr must lie in (0, 1)")
        if self.embed_mode not in ("real", "replace"):
            raise ValueError(f"embed_mode must be 'real' or 'replace', got {self.embed_mode!r}")
        self.surrogate()
        self.mask()

    @classmethod
    def from_dict(cls, data: dict) -> TrialConfig:
        return _from_mapping(cls, data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["translation_px"] = list(self.translation_px)
        d["rotation_deg"] = list(self.rotation_deg)
        return d

    def surrogate(self) -> SurrogateConfig:
        return SurrogateConfig(self.stride, self.kernel_sigma_px, self.kernel_radius_px, self.boundary)

    def mask(self) -> RingMask:
        # simulated latents carry only the masked channel, at index 0
        return make_ring_mask(self.latent_width, self.latent_height, self.r_min, self.r_max, 0)

    def cells(self) -> list[tuple[float, float]]:
        """``(translation_px, rotation_deg)`` pairs, translation-major."""
        return [(d, t) for d in self.translation_px for t in self.rotation_deg]

    def offsets(self, delta: float) -> tuple[float, float]:
        if delta == 0:
            return 0.0, 0.0
        a = math.radians(self.translation_direction_deg)
        dx, dy = delta * math.cos(a), delta * math.sin(a)
        # keep axis-aligned directions exact
        return (0.0 if abs(dx) < 1e-12 * delta else dx), (0.0 if abs(dy) < 1e-12 * delta else dy)


@dataclass
class SweepReport:
    config: TrialConfig
    rows: list[dict]
    scores: dict = field(default_factory=dict, repr=False)  # cell -> {"wm": array, "clean": array}


def trial_seed(master: int, cell: int, trial: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, cell, trial, stream])


def _attack_chain(z: LatentGrid, cfg: TrialConfig, sur: SurrogateConfig, dx: float, dy: float,
                  theta: float) -> tuple[LatentGrid, np.ndarray, np.ndarray]:
    img = decode_upsample(z, sur)
    attacked = geo.warp(img, dx, dy, theta, 1.0, pad_source=img)
    return encode_downsample(attacked, sur), img, attacked


def _run_trial(cfg: TrialConfig, sur: SurrogateConfig, mask: RingMask, key: WatermarkKey,
               cell: int, trial: int, dx: float, dy: float, theta: float, want_psnr: bool) -> dict:
    h, w = cfg.latent_height, cfg.latent_width
    z = LatentGrid(np.random.default_rng(trial_seed(cfg.seed, cell, trial, 0)).standard_normal((1, h, w)))
    z_clean = LatentGrid(np.random.default_rng(trial_seed(cfg.seed, cell, trial, 1)).standard_normal((1, h, w)))
    zw = embed_key(z, mask, key, cfg.embed_mode)
    rec, img, attacked = _attack_chain(zw, cfg, sur, dx, dy, theta)
    rec_clean, _, _ = _attack_chain(z_clean, cfg, sur, dx, dy, theta)
    out = {
        "d": detection_distance(rec, mask, key),
        "d_clean": detection_distance(rec_clean, mask, key),
        "bits": bit_accuracy(rec, mask, key),
        "corr": real_correlation(rec, mask, key),
    }
    if want_psnr:
        a = 0.5 + cfg.display_scale * img
        b = 0.5 + cfg.display_scale * attacked
        radius = min(int(math.ceil(max(abs(dx), abs(dy)))) + 1, min(a.shape[-2:]) // 4)
        out["raw_psnr"] = psnr(np.clip(b, 0, 1), np.clip(a, 0, 1))
        out["aligned"] = aligned_psnr(np.clip(a, 0, 1), np.clip(b, 0, 1), radius)
    return out


def _cell_row(cfg: TrialConfig, cell: int, delta: float, theta: float, dx: float, dy: float,
              results: list[dict]) -> tuple[dict, dict]:
    d = np.array([r["d"] for r in results])
    dc = np.array([r["d_clean"] for r in results])
    corr = np.array([r["corr"] for r in results])
    bits = np.array([r["bits"] for r in results])
    for name, arr in (("d", d), ("d_clean", dc), ("corr", corr), ("bit_accuracy", bits)):
        if not np.all(np.isfinite(arr)):
            bad = np.flatnonzero(~np.isfinite(arr)).tolist()
            raise NumericalError(
                f"non-finite {name} in cell {cell} (translation {delta} px, rotation {theta} deg)",
                {"cell": cell, "metric": name, "trials": bad},
            )
    tpr = tpr_at_fpr(RocInput(dc.tolist(), d.tolist(), cfg.target_fpr))
    pred = geo.predict(delta, theta, cfg.r_max, cfg.stride, cfg.latent_width)
    first = results[0]
    raw = first.get("raw_psnr", math.nan)
    al, shift = first.get("aligned", (math.nan, (0, 0)))
    row = {
        "cell": cell, "translation_px": delta, "rotation_deg": theta, "dx_px": dx, "dy_px": dy,
        "trials": len(results),
        "mean_d": float(np.mean(d)), "std_d": float(np.std(d)),
        "mean_d_clean": float(np.mean(dc)), "std_d_clean": float(np.std(dc)),
        "tpr_at_fpr": tpr, "target_fpr": cfg.target_fpr,
        "detect_rate": float(np.mean(d < cfg.tau)),
        "bit_accuracy": float(np.mean(bits)), "mean_corr": float(np.mean(corr)),
        "corr_ratio": math.nan,
        "r_max": cfg.r_max, "stride": cfg.stride, "latent_width": cfg.latent_width,
        "phase_range_rad": pred.phase_range, "alpha_rad": pred.alpha, "coord_drift": pred.drift,
        "expected_attenuation": pred.attenuation, "coherence_est": math.nan,
        "raw_psnr_db": raw, "aligned_psnr_db": al,
        "aligned_shift_y": shift[0], "aligned_shift_x": shift[1],
    }
    return row, {"wm": d, "clean": dc, "corr": corr, "bits": bits}


def run_detection_sweep(cfg: TrialConfig, threads: int = 1) -> SweepReport:
    """Score every ``(translation, rotation)`` cell over ``cfg.trials`` trials.

    Each trial draws its latents from ``SeedSequence([seed, cell, trial,
    stream])``, so results do not depend on ``threads`` or on which cells
    are present.
    """
    sur, mask = cfg.surrogate(), cfg.mask()
    key = sample_key(mask, cfg.key_seed)
    cells = cfg.cells()
    jobs = []
    for ci, (delta, theta) in enumerate(cells):
        dx, dy = cfg.offsets(delta)
        for t in range(cfg.trials):
            jobs.append((ci, t, dx, dy, theta, t < cfg.psnr_trials))

    def work(job):
        ci, t, dx, dy, theta, want = job
        return _run_trial(cfg, sur, mask, key, ci, t, dx, dy, theta, want)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    rows, scores = [], {}
    for ci, (delta, theta) in enumerate(cells):
        dx, dy = cfg.offsets(delta)
        chunk = results[ci * cfg.trials:(ci + 1) * cfg.trials]
        row, sc = _cell_row(cfg, ci, delta, theta, dx, dy, chunk)
        rows.append(row)
        scores[ci] = sc

    # correlation relative to the unshifted cell at the same rotation
    base = {r["rotation_deg"]: r["mean_corr"] for r in rows if r["translation_px"] == 0}
    for r in rows:
        ref = base.get(r["rotation_deg"])
        if ref is not None and ref != 0:
            r["corr_ratio"] = r["mean_corr"] / ref
            r["coherence_est"] = geo.estimate_coherence(r["corr_ratio"], r["alpha_rad"])
    return SweepReport(cfg, rows, scores)


def decorrelated_distance(mask: RingMask, key: WatermarkKey, trials: int = 200, seed: int = 0) -> float:
    """Monte-Carlo ``E|eta - Re Z|`` with ``Z`` the spectrum of a fresh standard-normal field."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(trials):
        z = LatentGrid(rng.standard_normal((1, mask.height, mask.width)))
        vals.append(detection_distance(z, mask, key))
    return float(np.mean(vals))


def measure_phase_shift(cfg: TrialConfig, dx: float, dy: float = 0.0, seed: int = 0) -> dict:
    """Latent phase change over the ring under a circular pixel shift, next to its prediction.

    Both latents come from the same decoded image, once shifted, so the
    comparison isolates the shift. Returns per-coordinate measured and
    predicted phases and their mean absolute wrapped difference.
    """
    sur = cfg.surrogate()
    mask = cfg.mask()
    z = LatentGrid(np.random.default_rng(seed).standard_normal((1, cfg.latent_height, cfg.latent_width)))
    img = decode_upsample(z, sur)
    ref = encode_downsample(img, sur)
    moved = encode_downsample(geo.warp(img, dx, dy, circular=True), sur)
    rows, cols = mask.indices()
    canon = mask.canonical
    z0 = fft2_centered(ref.values[0])[rows, cols][canon]
    z1 = fft2_centered(moved.values[0])[rows, cols][canon]
    measured = np.angle(z1 * np.conj(z0))
    uv = mask.canonical_coords
    predicted = geo.phase_ramp(uv[:, 0], uv[:, 1], dx, dy, cfg.stride, cfg.latent_width, cfg.latent_height)
    err = np.angle(np.exp(1j * (measured - predicted)))
    return {"measured": measured, "predicted": predicted, "coords": uv, "mae": float(np.mean(np.abs(err)))}


# ---------------------------------------------------------------- removal


@dataclass(frozen=True)
class RemovalConfig:
    latent_width: int = 16
    latent_height: int = 16
    latent_channels: int = 3
    stride: int = 8
    kernel_sigma_px: float | None = None
    boundary: str = "circular"
    r_min: float = 1.0
    r_max: float = 4.0
    mask_channel: int = 0
    key_seed: int = 0
    embed_mode: str = "real"
    display_scale: float = 0.15
    patch_size: int = 16
    margin: int = 2
    n_patch: int = 9
    beta_px: float | None = None
    iterations: int = 200
    learning_rate: float = 0.01
    l1_weight: float = 1.0
    freq_weight: float = 1.0
    freq_gamma: float = 1.0
    translation_px: float = 10.0
    rotation_deg: float = 5.0
    scale_lo: float = 0.97
    scale_hi: float = 1.03
    tau: float = 0.5
    search_radius_px: int | None = None

    def __post_init__(self):
        if self.latent_channels != 3:
            raise ValueError("the removal pipeline renders RGB scenes; latent_channels must be 3")
        if not 0 <= self.mask_channel < 3:
            raise ValueError("mask_channel must be 0, 1 or 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.display_scale > 0:
            raise ValueError("display_scale must be positive")
        self.bounds()

    @classmethod
    def from_dict(cls, data: dict) -> RemovalConfig:
        return _from_mapping(cls, data)

    def to_dict(self) -> dict:
        return asdict(self)

    def bounds(self) -> geo.PerturbationBounds:
        return geo.PerturbationBounds(self.translation_px, self.rotation_deg, self.scale_lo, self.scale_hi)

    def surrogate(self) -> SurrogateConfig:
        return SurrogateConfig(self.stride, self.kernel_sigma_px, None, self.boundary)

    def loss(self) -> LossSpec:
        return LossSpec(self.l1_weight, FrequencyLossSpec(self.freq_gamma, self.freq_weight))


@dataclass
class RemovalReport:
    d_pre: float
    d_control: float
    d_post: float
    tau: float
    detected_pre: bool
    detected_control: bool
    detected_post: bool
    raw_psnr_db: float
    aligned_psnr_db: float
    recovered_shift: tuple[int, int]
    control_psnr_db: float
    transform: geo.GeometricTransform
    loss_trace: list[float]
    clamped: int
    uncovered: int
    method: str = "direct per-image Gaussian fit (no learned encoder); aligned PSNR by integer translation search"
    images: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "d_pre": self.d_pre, "d_control": self.d_control, "d_post": self.d_post, "tau": self.tau,
            "detected_pre": self.detected_pre, "detected_control": self.detected_control,
            "detected_post": self.detected_post,
            "raw_psnr_db": self.raw_psnr_db, "aligned_psnr_db": self.aligned_psnr_db,
            "recovered_shift_yx": list(self.recovered_shift), "control_psnr_db": self.control_psnr_db,
            "transform": self.transform.to_json(), "clamped_offsets": self.clamped,
            "uncovered_pixels": self.uncovered, "iterations": len(self.loss_trace),
            "final_loss": self.loss_trace[-1] if self.loss_trace else math.nan,
        }


@dataclass
class RemovalFit:
    """Everything the perturbation stage needs from one watermark-and-fit run."""
    cfg: RemovalConfig
    seed: int
    mask: RingMask
    key: WatermarkKey
    marked: np.ndarray
    fitted: object
    control: np.ndarray
    d_pre: float
    d_control: float
    loss_trace: list[float]

    def distance(self, img: np.ndarray) -> float:
        z = encode_downsample((img - 0.5) / self.cfg.display_scale, self.cfg.surrogate())
        return detection_distance(z, self.mask, self.key)


def fit_removal_scene(cfg: RemovalConfig = RemovalConfig(), seed: int = 0, image=None) -> RemovalFit:
    """Watermark a latent, decode it and fit a Gaussian scene to the result.

    ``image`` (``(3, H, W)`` in [0, 1]) seeds the latent through the encoder;
    without it the latent is standard normal. Display images are
    ``0.5 + display_scale * decoded``.
    """
    sur = cfg.surrogate()
    if image is not None:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"image must have shape (3, H, W), got {image.shape}")
        z = encode_downsample((image - 0.5) / cfg.display_scale, sur)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        z = LatentGrid(rng.standard_normal((3, cfg.latent_height, cfg.latent_width)))
    mask = make_ring_mask(z.width, z.height, cfg.r_min, cfg.r_max, cfg.mask_channel)
    key = sample_key(mask, cfg.key_seed)
    marked = 0.5 + cfg.display_scale * decode_upsample(embed_key(z, mask, key, cfg.embed_mode), sur)

    _, height, width = marked.shape
    scene = init_scene(height, width, cfg.patch_size, cfg.margin, cfg.n_patch, seed=seed, beta=cfg.beta_px)
    fitted, trace = fit(scene, marked, OptimizerConfig(lr=cfg.learning_rate), cfg.iterations, cfg.loss())
    control = rasterize(fitted)
    out = RemovalFit(cfg, seed, mask, key, marked, fitted, control, 0.0, 0.0, trace)
    out.d_pre = out.distance(marked)
    out.d_control = out.distance(control)
    return out


def rerender_removal(state: RemovalFit, t: geo.GeometricTransform) -> RemovalReport:
    """Perturb the fitted means by ``t``, re-render and score against the watermark.

    Pixels no moved render window reaches take the unperturbed render's value.
    """
    cfg = state.cfg
    moved = perturb_means(state.fitted, t)
    rendered = rasterize(moved)
    reached = coverage(moved)
    output = np.where(reached, rendered, state.control)
    d_post = state.distance(output)
    if not all(map(math.isfinite, (state.d_pre, state.d_control, d_post))):
        raise NumericalError("non-finite detection distance in removal run", {"seed": state.seed})

    _, height, width = output.shape
    a = np.clip(state.marked, 0, 1)
    b = np.clip(output, 0, 1)
    radius = cfg.search_radius_px
    if radius is None:
        radius = int(math.ceil(cfg.translation_px)) + 1
    radius = min(radius, min(height, width) // 4)
    al, shift = aligned_psnr(a, b, radius)
    return RemovalReport(
        d_pre=state.d_pre, d_control=state.d_control, d_post=d_post, tau=cfg.tau,
        detected_pre=decide(state.d_pre, cfg.tau).verdict,
        detected_control=decide(state.d_control, cfg.tau).verdict,
        detected_post=decide(d_post, cfg.tau).verdict,
        raw_psnr_db=psnr(a, b), aligned_psnr_db=al, recovered_shift=shift,
        control_psnr_db=psnr(a, np.clip(state.control, 0, 1)), transform=t, loss_trace=state.loss_trace,
        clamped=int(moved.diagnostics.get("clamped", 0)), uncovered=int((~reached).sum()),
        images={"watermarked": state.marked, "control": state.control, "output": output},
    )


def run_removal_pipeline(cfg: RemovalConfig = RemovalConfig(), seed: int = 0, image=None,
                         transform: geo.GeometricTransform | None = None) -> RemovalReport:
    """Watermark, fit a Gaussian scene, perturb its means, re-render and re-detect.

    ``transform`` overrides the perturbation sampled from ``cfg.bounds()``.
    """
    state = fit_removal_scene(cfg, seed, image)
    t = transform if transform is not None else sample_removal_transform(cfg, seed)
    return rerender_removal(state, t)


def sample_removal_transform(cfg: RemovalConfig, seed: int) -> geo.GeometricTransform:
    return geo.sample_micro_perturbation(cfg.bounds(), np.random.SeedSequence([seed, 1]))
