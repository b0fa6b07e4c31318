import numpy as np
import pytest
from hypothesis import given, strategies as st

from xrecon.metrics import (ResolutionError, affine_error, highpass, normalize_phase, phase_ssim,
                            power_spectrum, spectrum_resolution, ssim)
from xrecon.transforms import IDENTITY_AFFINE, AffineParams, affine_matrix, d_affine


def test_ssim_identity_and_bounds(rng):
    a = rng.random((32, 32))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(np.ones((4, 4)), np.ones((4, 4))) == 1.0
    assert -1 <= ssim(rng.random((32, 32)), a) < 0.5
    assert ssim(1 - a, a) < 0


def test_ssim_hand_computed():
    a = np.array([0.0, 1.0, 2.0, 3.0])
    r = np.array([0.0, 1.0, 1.0, 2.0])
    mu_a, mu_r = a.mean(), r.mean()
    va, vr = a.var(), r.var()
    cov = np.mean((a - mu_a) * (r - mu_r))
    c1, c2 = (0.01 * 2) ** 2, (0.03 * 2) ** 2
    c3 = c2 / 2
    want = ((2 * mu_a * mu_r + c1) / (mu_a**2 + mu_r**2 + c1) * (2 * np.sqrt(va * vr) + c2) / (va + vr + c2)
            * (cov + c3) / (np.sqrt(va * vr) + c3))
    assert ssim(a, r) == pytest.approx(want)


@given(st.floats(0.1, 10), st.floats(-5, 5))
def test_phase_ssim_ignores_offset_and_scale(scale, offset):
    rng = np.random.default_rng(0)
    p = rng.random((16, 16))
    assert phase_ssim(scale * p + offset, p) == pytest.approx(1.0)
    n = normalize_phase(scale * p + offset)
    assert abs(n.mean()) < 1e-12 and n.std() == pytest.approx(1.0)


def _fractal(n, rng, noise, exponent=2.0):
    f = np.sqrt(np.fft.fftfreq(n)[:, None] ** 2 + np.fft.fftfreq(n)[None, :] ** 2)
    f[0, 0] = 1
    spec = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * f ** (-exponent / 2)
    spec[0, 0] = 0
    return np.real(np.fft.ifft2(spec)) * n + noise * rng.standard_normal((n, n))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_spectrum_resolution_finds_known_crossover(seed):
    rng = np.random.default_rng(seed)
    n = 512
    img = _fractal(n, rng, noise=0.0)
    # signal power ~ P0 / f^2; white noise of variance s^2 has power s^2 n^2 per bin
    f, p = power_spectrum(img)
    p0 = np.median(p * f**2)
    f_c = 0.35 * 0.5  # crossing placed between the two fit bands
    sigma = np.sqrt(p0 / f_c**2 / (n * n))
    est = spectrum_resolution(img + sigma * rng.standard_normal((n, n)))
    assert est == pytest.approx(f_c, rel=0.2)


def test_spectrum_resolution_parallel_lines_raise(rng):
    with pytest.raises(ResolutionError, match="parallel"):
        spectrum_resolution(rng.standard_normal((128, 128)))


def test_power_spectrum_axis_and_errors(rng):
    vol = rng.standard_normal((8, 64, 4))
    f, p = power_spectrum(vol, axis=1, pixel_size=2.0)
    assert f.max() == pytest.approx(0.25)
    assert p.shape == f.shape
    with pytest.raises(ValueError):
        power_spectrum(vol)


def test_highpass_removes_low_frequencies(rng):
    n = 64
    y, x = np.mgrid[:n, :n]
    low = np.cos(2 * np.pi * x / n)
    high = np.cos(2 * np.pi * 20 * x / n)
    out = highpass(low + high, cutoff=0.1, sigma=0.5)
    np.testing.assert_allclose(out, high, atol=0.05)


def test_affine_metric_identity_and_pixel_independence():
    a = AffineParams(0.01, 0, 0, 1.01, 0.99, 3.0, -2.0).as_array()
    assert affine_error(a, a, (256, 256)) == pytest.approx(0.0, abs=1e-12)
    # the same physical misfit (in image fractions) gives the same error at any size
    b = a.copy()
    b[5] += 1.0
    a2 = a * [1, 1, 1, 1, 1, 2, 2]
    c = a2.copy()
    c[5] += 2.0
    assert affine_error(b, a, (256, 256)) == pytest.approx(affine_error(c, a2, (512, 512)), rel=1e-9)
    assert d_affine(np.eye(3), affine_matrix(AffineParams.from_array(IDENTITY_AFFINE))) == 0.0
