import numpy as np
import pytest
from hypothesis import given, strategies as st

from xrecon import autodiff as ad
from xrecon.optics import (
    PropagationSpec,
    fourier_shift,
    fraunhofer_propagate,
    fresnel_kernel,
    fresnel_propagate,
    modulate,
    multislice_propagate,
    multislice_sparse,
    project_modulate,
    slice_channels,
    wavelength_from_energy,
    with_buffer_zone,
)
from xrecon.tensor import ComplexPair

LAM = 1e-10
PIX = 1e-8


def rand_field(rng, shape=(16, 16)):
    return ComplexPair(rng.normal(size=shape), rng.normal(size=shape))


def energy(f):
    return float(np.sum(f.abs2()))


@pytest.mark.parametrize("kernel", ["paraxial", "sommerfeld_rayleigh"])
@pytest.mark.parametrize("conv", ["negative", "positive"])
def test_propagation_is_unitary(rng, kernel, conv):
    psi = rand_field(rng)
    spec = PropagationSpec(LAM, PIX, 2e-6, kernel, conv)
    out = fresnel_propagate(psi, spec)
    assert abs(energy(out) - energy(psi)) < 1e-10 * energy(psi)


def test_kernel_composition(rng):
    psi = rand_field(rng)
    spec = PropagationSpec(LAM, PIX)
    two = fresnel_propagate(fresnel_propagate(psi, spec.at(1e-6)), spec.at(2.5e-6))
    one = fresnel_propagate(psi, spec.at(3.5e-6))
    np.testing.assert_allclose(two.to_complex(), one.to_complex(), atol=1e-10)


def test_zero_distance_is_identity(rng):
    psi = rand_field(rng)
    out = fresnel_propagate(psi, PropagationSpec(LAM, PIX, 0.0))
    np.testing.assert_allclose(out.to_complex(), psi.to_complex(), atol=1e-12)


def test_backpropagation_inverts(rng):
    psi = rand_field(rng)
    spec = PropagationSpec(LAM, PIX)
    back = fresnel_propagate(fresnel_propagate(psi, spec.at(5e-6)), spec.at(-5e-6))
    np.testing.assert_allclose(back.to_complex(), psi.to_complex(), atol=1e-10)


def test_sign_conventions_are_conjugate(rng):
    psi = rand_field(rng)
    neg = fresnel_propagate(psi, PropagationSpec(LAM, PIX, 3e-6, sign_convention="negative"))
    pos = fresnel_propagate(psi.conj(), PropagationSpec(LAM, PIX, 3e-6, sign_convention="positive"))
    np.testing.assert_allclose(neg.to_complex(), np.conj(pos.to_complex()), atol=1e-10)


def test_gaussian_beam_width_matches_closed_form():
    n, pix, lam = 256, 1e-7, 1e-9
    w0 = 1.5e-6
    y, x = (np.mgrid[:n, :n] - n / 2) * pix
    r2 = x**2 + y**2
    psi = ComplexPair(np.exp(-r2 / w0**2), np.zeros((n, n)))
    z = 5e-6
    out = fresnel_propagate(psi, PropagationSpec(lam, pix, z)).abs2()
    zr = np.pi * w0**2 / lam
    w = w0 * np.sqrt(1 + (z / zr) ** 2)
    expected = (w0 / w) ** 2 * np.exp(-2 * r2 / w**2)
    np.testing.assert_allclose(out, expected, atol=1e-8)


def test_sommerfeld_approaches_paraxial_at_low_angles(rng):
    # smooth field: only small spatial frequencies populated
    n = 32
    y, x = np.mgrid[:n, :n] - n / 2
    psi = ComplexPair(np.exp(-(x**2 + y**2) / 40.0), np.zeros((n, n)))
    spec = PropagationSpec(1e-10, 1e-7, 1e-4)
    par = fresnel_propagate(psi, spec).to_complex()
    som = fresnel_propagate(psi, spec.at(1e-4).__class__(1e-10, 1e-7, 1e-4, "sommerfeld_rayleigh")).to_complex()
    # the two differ by the global phase exp(-ikd) only
    ratio = np.vdot(par, som) / abs(np.vdot(par, som))
    np.testing.assert_allclose(som, par * ratio, atol=1e-8)


def test_sommerfeld_evanescent_zeroed():
    spec = PropagationSpec(4e-8, 1e-8, 1e-7, "sommerfeld_rayleigh")
    h = fresnel_kernel(spec, (8, 8))
    nu2 = np.add.outer(np.fft.fftfreq(8, 1e-8) ** 2, np.fft.fftfreq(8, 1e-8) ** 2)
    evan = 1 - (4e-8) ** 2 * nu2 <= 0
    assert evan.any()
    assert np.all(h.re[evan] == 0) and np.all(h.im[evan] == 0)


def test_fraunhofer_is_unitary_dft(rng):
    psi = rand_field(rng, (8, 8))
    out = fraunhofer_propagate(psi).to_complex()
    np.testing.assert_allclose(out, np.fft.ifft2(psi.to_complex()) * 8, atol=1e-12)
    pos = fraunhofer_propagate(psi, "positive").to_complex()
    np.testing.assert_allclose(pos, np.fft.fft2(psi.to_complex()) / 8, atol=1e-12)


@given(st.integers(-7, 7), st.integers(-7, 7))
def test_fourier_shift_integer_is_roll(dy, dx):
    rng = np.random.default_rng(abs(dy * 31 + dx))
    psi = rand_field(rng, (12, 10))
    out = fourier_shift(psi, np.array([float(dy), float(dx)])).to_complex()
    np.testing.assert_allclose(out, np.roll(psi.to_complex(), (dy, dx), axis=(0, 1)), atol=1e-10)


def test_fourier_shift_grad_check(rng):
    psi = rand_field(rng, (8, 8))
    w = rng.normal(size=(8, 8))
    f = lambda p: ad.sum_(ad.mul(fourier_shift(psi, p["s"]).re, w))
    assert ad.grad_check(f, {"s": np.array([0.3, -1.2])}) < 1e-5


def test_distance_grad_check(rng):
    psi = rand_field(rng, (8, 8))
    w = rng.normal(size=(8, 8))
    spec = PropagationSpec(1e-10, 1e-8)
    f = lambda p: ad.sum_(ad.mul(fresnel_propagate(psi, spec.at(p["d"])).abs2(), w))
    assert ad.grad_check(f, {"d": np.array(3e-6)}, step=1e-12) < 1e-4


def test_multislice_vacuum_collapses_to_free_propagation(rng):
    psi = rand_field(rng)
    vol = np.zeros((16, 16, 5, 2))
    spec = PropagationSpec(LAM, PIX)
    out = multislice_propagate(psi, vol, spec, "delta_beta")
    ref = fresnel_propagate(psi, spec.at(5 * PIX))
    np.testing.assert_allclose(out.to_complex(), ref.to_complex(), atol=1e-10)
    ri = np.zeros((16, 16, 5, 2))
    ri[..., 0] = 1
    out2 = multislice_propagate(psi, ri, spec, "real_imag")
    np.testing.assert_allclose(out2.to_complex(), ref.to_complex(), atol=1e-10)


def test_multislice_matches_loop_oracle(rng):
    psi = rand_field(rng, (8, 8))
    vol = rng.uniform(0, 1e-3, size=(8, 8, 3, 2))
    spec = PropagationSpec(LAM, PIX)
    k = 2 * np.pi / LAM
    z = psi.to_complex()
    nu2 = np.add.outer(np.fft.fftfreq(8, PIX) ** 2, np.fft.fftfreq(8, PIX) ** 2)
    h = np.exp(1j * np.pi * LAM * PIX * nu2)
    for j in range(3):
        z = z * np.exp(-k * vol[:, :, j, 1] * PIX) * np.exp(1j * k * vol[:, :, j, 0] * PIX)
        z = np.fft.ifft2(np.fft.fft2(z) * h)
    out = multislice_propagate(psi, vol, spec, "delta_beta").to_complex()
    np.testing.assert_allclose(out, z, atol=1e-12)


def test_binning_conserves_projection(rng):
    psi = rand_field(rng, (8, 8))
    vol = rng.uniform(0, 1e-4, size=(8, 8, 4, 2))
    spec = PropagationSpec(LAM, PIX)
    full = multislice_propagate(psi, vol, spec, "delta_beta", binning=4).to_complex()
    ref = fresnel_propagate(
        modulate(psi, (vol[..., 0].sum(2), vol[..., 1].sum(2)), "delta_beta", spec.wavenumber, PIX),
        spec.at(4 * PIX),
    ).to_complex()
    np.testing.assert_allclose(full, ref, atol=1e-12)
    with pytest.raises(ValueError):
        multislice_propagate(psi, vol, spec, "delta_beta", binning=3)


def test_sparse_with_uniform_positions_matches_dense(rng):
    psi = rand_field(rng, (8, 8))
    vol = rng.uniform(0, 1e-3, size=(8, 8, 3, 2))
    spec = PropagationSpec(LAM, PIX)
    slices = [slice_channels(vol, j) for j in range(3)]
    sparse = multislice_sparse(psi, slices, np.arange(3) * PIX, spec, "delta_beta", exit_distance=PIX)
    dense = multislice_propagate(psi, vol, spec, "delta_beta")
    np.testing.assert_allclose(sparse.to_complex(), dense.to_complex(), atol=1e-12)


def test_sparse_rejects_unordered_positions(rng):
    psi = rand_field(rng, (4, 4))
    sl = [(np.zeros((4, 4)), np.zeros((4, 4)))] * 2
    with pytest.raises(ValueError):
        multislice_sparse(psi, sl, np.array([1e-6, 1e-6]), PropagationSpec(LAM, PIX), "delta_beta")


def test_sparse_gap_grad_check(rng):
    psi = rand_field(rng, (8, 8))
    vol = rng.uniform(0, 1e-2, size=(8, 8, 2, 2))
    spec = PropagationSpec(LAM, PIX)
    w = rng.normal(size=(8, 8))

    def f(p):
        slices = [slice_channels(vol, j) for j in range(2)]
        return ad.sum_(ad.mul(multislice_sparse(psi, slices, p["z"], spec, "delta_beta").abs2(), w))

    assert ad.grad_check(f, {"z": np.array([0.0, 2e-6])}, step=1e-12) < 1e-4


def test_project_modulate_real_imag_product(rng):
    psi = rand_field(rng, (4, 4))
    vol = rng.normal(size=(4, 4, 2, 2))
    out = project_modulate(psi, vol, "real_imag", 1.0, 1.0).to_complex()
    t = (vol[..., 0] + 1j * vol[..., 1]).prod(axis=2)
    np.testing.assert_allclose(out, psi.to_complex() * t, atol=1e-12)


def test_buffer_zone_identity_and_errors(rng):
    psi = rand_field(rng, (6, 6))
    out = with_buffer_zone(psi, 3, lambda f: f)
    np.testing.assert_array_equal(out.to_complex(), psi.to_complex())
    with pytest.raises(ValueError):
        with_buffer_zone(psi, -1, lambda f: f)
    with pytest.raises(ValueError):
        with_buffer_zone(psi, 7, lambda f: f)


def test_buffer_zone_reduces_wraparound():
    n = 32
    psi = ComplexPair(np.ones((n, n)), np.zeros((n, n)))
    psi.re[:, :4] = 0.0  # dark band at the left edge wraps around without padding
    spec = PropagationSpec(1e-10, 1e-8, 2e-5)
    plain = fresnel_propagate(psi, spec).abs2()
    padded = with_buffer_zone(psi, 16, lambda f: fresnel_propagate(f, spec)).abs2()
    right_col = slice(n - 3, n)
    assert np.abs(padded[:, right_col] - 1).max() < np.abs(plain[:, right_col] - 1).max()


def test_spec_validation():
    with pytest.raises(ValueError):
        PropagationSpec(0.0, 1e-8)
    with pytest.raises(ValueError):
        PropagationSpec(1e-10, 1e-8, kernel="bogus")
    with pytest.raises(ValueError):
        PropagationSpec(1e-10, 1e-8, sign_convention="sideways")


def test_wavelength_at_17_5_kev():
    assert abs(wavelength_from_energy(17500.0) * 1e9 - 0.07085) < 1e-5
