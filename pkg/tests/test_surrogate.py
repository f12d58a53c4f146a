import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatmark.spectral import LatentGrid, fft2_centered, ifft2_centered, make_ring_mask
from splatmark.surrogate import SurrogateConfig, decode_upsample, encode_downsample, kernel_taps

CFG = SurrogateConfig()


def circular_conv2d(img, kernel1d, offsets):
    """Brute-force 2-D circular convolution with an outer-product kernel."""
    h, w = img.shape
    out = np.zeros_like(img)
    k2 = np.outer(kernel1d, kernel1d)
    offs = offsets.astype(int)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a, oy in enumerate(offs):
                for b, ox in enumerate(offs):
                    acc += k2[a, b] * img[(i - oy) % h, (j - ox) % w]
            out[i, j] = acc
    return out


def band_limited(n, radius, seed):
    rng = np.random.default_rng(seed)
    s = fft2_centered(rng.standard_normal((n, n)))
    m = make_ring_mask(n, n, 0, radius)
    keep = np.zeros((n, n), bool)
    keep[m.indices()] = True
    z = ifft2_centered(np.where(keep, s, 0))
    return z / z.std()


def test_config_defaults_and_kernel_normalization():
    assert CFG.sigma == 4.0 and CFG.radius == 12
    for half in (False, True):
        _, w = kernel_taps(CFG.sigma, CFG.radius, half)
        assert abs(w.sum() - 1) < 1e-12


@pytest.mark.parametrize("kwargs", [{"stride": 0}, {"sigma": -1.0}, {"sigma": 2.0, "radius": 5},
                                    {"boundary": "reflect"}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SurrogateConfig(**kwargs)


@pytest.mark.parametrize("boundary", ["circular", "replicate"])
def test_constants_pass_through(boundary):
    cfg = SurrogateConfig(boundary=boundary)
    z = LatentGrid(np.full((2, 5, 7), 0.3))
    img = decode_upsample(z, cfg)
    assert img.shape == (2, 40, 56)
    assert np.allclose(img, 0.3, atol=1e-12)
    assert np.allclose(encode_downsample(np.full((1, 16, 24), -2.0), cfg).values, -2.0, atol=1e-12)


def test_decoded_impulse_matches_direct_convolution():
    cfg = SurrogateConfig(stride=4)
    z = np.zeros((1, 6, 6))
    z[0, 2, 3] = 1.0
    img = decode_upsample(LatentGrid(z), cfg)[0]
    box = np.zeros((24, 24))
    box[8:12, 12:16] = 1.0
    offsets, weights = kernel_taps(cfg.sigma, cfg.radius, False)
    assert np.allclose(img, circular_conv2d(box, weights, offsets), atol=1e-12)
    assert img.sum() == pytest.approx(16.0, abs=1e-12)


def test_round_trip_on_band_limited_latents():
    for seed in range(10):
        z = band_limited(64, 2, seed)
        back = encode_downsample(decode_upsample(LatentGrid(z[None]), CFG), CFG).values[0]
        assert np.max(np.abs(back - z)) < 0.05


def test_integer_stride_shift_equivariance():
    img = np.random.default_rng(0).standard_normal((1, 64, 48))
    base = encode_downsample(img, CFG).values
    for k in (1, 2, -3):
        shifted = encode_downsample(np.roll(img, (0, k * CFG.stride), axis=(1, 2)), CFG).values
        assert np.allclose(shifted, np.roll(base, (0, k), axis=(1, 2)), atol=1e-12)
        shifted = encode_downsample(np.roll(img, (k * CFG.stride, 0), axis=(1, 2)), CFG).values
        assert np.allclose(shifted, np.roll(base, (k, 0), axis=(1, 2)), atol=1e-12)


def test_half_stride_shift_phase_along_u_axis():
    z = LatentGrid(np.random.default_rng(5).standard_normal((1, 64, 64)))
    img = decode_upsample(z, CFG)[0]
    # circular 4-pixel shift is exact on the pixel grid
    moved = np.roll(img, 4, axis=1)
    s0 = fft2_centered(encode_downsample(img, CFG).values[0])
    s1 = fft2_centered(encode_downsample(moved, CFG).values[0])
    for u in range(-16, 17):
        if u == 0:
            continue
        c = 32 + u
        measured = np.angle(s1[32, c] * np.conj(s0[32, c]))
        expected = -2 * math.pi * u * 4 / (8 * 64)
        assert abs(np.angle(np.exp(1j * (measured - expected)))) < 0.1


def test_indivisible_image_rejected():
    with pytest.raises(ValueError):
        encode_downsample(np.zeros((1, 20, 16)), CFG)


def test_round_trip_is_diagonal_in_frequency():
    z = np.random.default_rng(1).standard_normal((32, 32))
    back = encode_downsample(decode_upsample(LatentGrid(z[None]), CFG), CFG).values[0]
    ratio = fft2_centered(back) / fft2_centered(z)
    # same real transfer for a different input
    z2 = np.random.default_rng(2).standard_normal((32, 32))
    back2 = encode_downsample(decode_upsample(LatentGrid(z2[None]), CFG), CFG).values[0]
    ratio2 = fft2_centered(back2) / fft2_centered(z2)
    assert np.allclose(ratio, ratio2, atol=1e-9)
    assert np.max(np.abs(ratio.imag)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3),
       st.sampled_from(["circular", "replicate"]))
def test_linearity(seed, a, b, boundary):
    cfg = SurrogateConfig(boundary=boundary)
    rng = np.random.default_rng(seed)
    i1, i2 = rng.standard_normal((2, 2, 16, 24))
    lhs = encode_downsample(a * i1 + b * i2, cfg).values
    rhs = a * encode_downsample(i1, cfg).values + b * encode_downsample(i2, cfg).values
    assert np.max(np.abs(lhs - rhs)) < 1e-9
