import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from xrecon.tensor import ComplexPair, NonFiniteError, fft2, freq_grid, ifft2


def brute_dft2(z):
    ny, nx = z.shape
    fy = np.exp(-2j * np.pi * np.outer(np.arange(ny), np.arange(ny)) / ny)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(nx), np.arange(nx)) / nx)
    return fy @ z @ fx.T


def test_fft2_matches_direct_sum(rng):
    z = rng.normal(size=(5, 7)) + 1j * rng.normal(size=(5, 7))
    out = fft2(ComplexPair.from_complex(z)).to_complex()
    np.testing.assert_allclose(out, brute_dft2(z), atol=1e-10)


def test_ifft2_is_normalized_inverse(rng):
    z = rng.normal(size=(6, 4)) + 1j * rng.normal(size=(6, 4))
    back = ifft2(fft2(ComplexPair.from_complex(z))).to_complex()
    np.testing.assert_allclose(back, z, atol=1e-12)


def test_fft_of_delta_is_flat():
    z = np.zeros((4, 4), complex)
    z[0, 0] = 1
    np.testing.assert_allclose(fft2(ComplexPair.from_complex(z)).to_complex(), np.ones((4, 4)))


def test_nonfinite_input_rejected():
    re = np.zeros((2, 2))
    re[0, 1] = np.nan
    with pytest.raises(NonFiniteError):
        fft2(ComplexPair(re, np.zeros((2, 2))))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ComplexPair(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(float, (3, 4), elements=st.floats(-5, 5)), arrays(float, (3, 4), elements=st.floats(-5, 5)))
def test_complex_product_matches_numpy(a, b):
    pa = ComplexPair(a, b)
    pb = ComplexPair(b, -a)
    np.testing.assert_allclose((pa * pb).to_complex(), pa.to_complex() * pb.to_complex(), atol=1e-9)


def test_abs2_and_conj(rng):
    z = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    p = ComplexPair.from_complex(z)
    np.testing.assert_allclose(p.abs2(), np.abs(z) ** 2)
    np.testing.assert_allclose(p.conj().to_complex(), np.conj(z))


def test_freq_grid_layout():
    g = freq_grid((4, 6), 0.5)
    np.testing.assert_allclose(g.nu_x[0], np.fft.fftfreq(6, 0.5))
    np.testing.assert_allclose(g.nu_y[:, 0], np.fft.fftfreq(4, 0.5))
    with pytest.raises(ValueError):
        freq_grid((4, 4), 0.0)
