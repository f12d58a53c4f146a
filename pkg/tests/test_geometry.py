import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatmark import geometry as geo
from splatmark.geometry import GeometricTransform, PerturbationBounds
from splatmark.metrics import psnr


def smooth_image(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((3, h, w))
    for c in range(3):
        for _ in range(3):
            fx, fy = rng.integers(1, 3, size=2)
            ph = rng.uniform(0, 2 * math.pi)
            img[c] += np.cos(2 * math.pi * (fx * xx / w + fy * yy / h) + ph)
    return 0.5 + 0.1 * img


def test_identity_is_exact_for_any_pad():
    img = np.random.default_rng(0).random((3, 16, 16))
    out = geo.apply_transform(img, GeometricTransform(), pad_source=np.zeros_like(img))
    assert np.array_equal(out, img)
    assert np.array_equal(geo.apply_transform(img, GeometricTransform(), pad_source=img), img)


def test_integer_translation_index_arithmetic():
    rng = np.random.default_rng(1)
    img, pad = rng.random((2, 12, 10)), rng.random((2, 12, 10))
    out = geo.apply_transform(img, GeometricTransform(dx=3), pad_source=pad)
    assert np.array_equal(out[:, :, 3:], img[:, :, :-3])
    assert np.array_equal(out[:, :, :3], pad[:, :, :3])


def test_quarter_turn_on_quadrant_card():
    n = 8
    card = np.zeros((3, n, n))
    h = n // 2
    colors = {(0, 0): (1, 0, 0), (0, 1): (0, 1, 0), (1, 1): (0, 0, 1), (1, 0): (1, 1, 0)}
    for (qr, qc), col in colors.items():
        card[:, qr * h:(qr + 1) * h, qc * h:(qc + 1) * h] = np.array(col)[:, None, None]
    out = geo.warp(card, theta_deg=90.0)
    # brute-force oracle: inverse rotation about the center on exact indices
    c = (n - 1) / 2
    oracle = np.empty_like(card)
    for i in range(n):
        for j in range(n):
            si, sj = int(round(c - (j - c))), int(round(c + (i - c)))
            oracle[:, i, j] = card[:, si, sj]
    assert np.array_equal(out, oracle)
    # each quadrant moved one step clockwise (y axis points down)
    step = {(0, 0): (0, 1), (0, 1): (1, 1), (1, 1): (1, 0), (1, 0): (0, 0)}
    for src, dst in step.items():
        block = out[:, dst[0] * h:(dst[0] + 1) * h, dst[1] * h:(dst[1] + 1) * h]
        assert np.all(block == np.array(colors[src])[:, None, None])


def test_rotation_matrix_exact_at_quarter_turns():
    assert np.array_equal(geo.rotation_matrix(90), [[0, -1], [1, 0]])
    assert np.array_equal(geo.rotation_matrix(-180), [[-1, 0], [0, -1]])
    r = geo.rotation_matrix(30)
    assert np.allclose(r @ r.T, np.eye(2), atol=1e-15)


def test_transform_validation_and_json():
    with pytest.raises(ValueError):
        GeometricTransform(theta_deg=180)
    with pytest.raises(ValueError):
        GeometricTransform(scale=2.0)
    t = GeometricTransform(1.5, -2.0, 3.0, 1.01)
    js = t.to_json()
    assert set(js) == {"translation_x_px", "translation_y_px", "rotation_deg", "scale"}
    assert GeometricTransform.from_json(js) == t


def test_pad_source_shape_checked():
    with pytest.raises(ValueError):
        geo.apply_transform(np.zeros((3, 8, 8)), GeometricTransform(dx=1), pad_source=np.zeros((3, 8, 9)))


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-45, 45), st.floats(0.6, 1.8))
def test_forward_and_inverse_maps_compose_to_identity(dx, dy, theta, scale):
    t = GeometricTransform(dx, dy, theta, scale)
    pts = np.random.default_rng(0).uniform(-5, 40, size=(20, 2))
    fwd = geo.forward_map(pts, t, (32, 32))
    back = geo.inverse_map(fwd, dx, dy, theta, scale, (32, 32))
    assert np.allclose(back, pts, atol=1e-9)


def test_translate_and_back_keeps_smooth_images():
    img = smooth_image()
    for d in ((2.5, 0.0), (0.3, -1.7), (4.0, 4.0)):
        there = geo.warp(img, *d, circular=True)
        back = geo.warp(there, -d[0], -d[1], circular=True)
        assert psnr(back, img) >= 40.0


# ---- closed-form predictors


def test_phase_ramp_examples():
    assert np.all(geo.phase_ramp(np.arange(-3, 4), 2, 0, 0, 8, 64, 64) == 0)
    assert geo.phase_ramp(16, 0, 8, 0, 8, 64, 64) == pytest.approx(-math.pi / 2, abs=1e-15)
    u, v = np.meshgrid(np.arange(-4, 5), np.arange(-4, 5))
    assert np.allclose(geo.phase_ramp(u, v, -3, 2, 8, 64, 48), -geo.phase_ramp(u, v, 3, -2, 8, 64, 48))


def test_phase_range_examples():
    assert geo.phase_range(16, 8, 8, 64) == math.pi
    assert geo.phase_range(16, 0, 8, 64) == 0
    assert geo.phase_range(16, 6, 8, 64) == pytest.approx(2 * geo.phase_range(16, 3, 8, 64), rel=1e-15)


def test_coord_drift_examples():
    assert 0.99 <= geo.coord_drift(16, math.radians(3.6)) <= 1.02
    assert geo.coord_drift(16, 0) == 0
    assert geo.coord_drift(0, 0.3) == 0
    with pytest.raises(ValueError):
        geo.coord_drift(-1, 0.1)


def test_expected_attenuation_examples():
    assert abs(geo.expected_attenuation(math.pi / 2, 1) - 2 / math.pi) < 1e-12
    assert geo.expected_attenuation(0, 0.4) == 0.4
    assert abs(geo.expected_attenuation(math.pi, 1)) < 1e-15
    with pytest.raises(ValueError):
        geo.expected_attenuation(1.0, 1.5)


def test_predict_bundles_the_columns():
    p = geo.predict(8, 3.6, 16, 8, 64)
    assert p.phase_range == math.pi and p.alpha == math.pi / 2
    assert p.attenuation == pytest.approx(2 / math.pi)
    assert p.drift == pytest.approx(16 * math.radians(3.6))


def test_coherence_estimate():
    assert geo.estimate_coherence(0.5, 0.0) == 0.5
    assert geo.estimate_coherence(2.0, 0.0) == 1.0
    assert math.isnan(geo.estimate_coherence(0.1, math.pi))


# ---- sampling


def test_zero_bounds_give_identity():
    t = geo.sample_micro_perturbation(PerturbationBounds.zero(), seed=4)
    assert t.is_identity


def test_sampling_is_deterministic_and_bounded():
    b = PerturbationBounds()
    assert geo.sample_micro_perturbation(b, 7) == geo.sample_micro_perturbation(b, 7)
    for s in range(50):
        t = geo.sample_micro_perturbation(b, s)
        assert abs(t.dx) <= 10 and abs(t.dy) <= 10 and abs(t.theta_deg) <= 5
        assert 0.97 <= t.scale <= 1.03


def test_sampled_translation_mean():
    b = PerturbationBounds()
    xs = [geo.sample_micro_perturbation(b, s).dx for s in range(1000)]
    sigma = 10 / math.sqrt(3)
    assert abs(np.mean(xs)) < 3 * sigma / math.sqrt(1000)


def test_bounds_validation():
    with pytest.raises(ValueError):
        PerturbationBounds(translation_px=-1)
    with pytest.raises(ValueError):
        PerturbationBounds(scale_lo=1.1, scale_hi=1.0)
    with pytest.raises(ValueError):
        PerturbationBounds(rotation_deg=90)
