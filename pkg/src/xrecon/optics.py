"""Wave propagation and object modulation built from autodiff primitives.

Fields are :class:`~xrecon.tensor.ComplexPair` values (``WaveField`` below is
just that type); the physical metadata (wavelength, pixel size) travels in a
:class:`PropagationSpec`. Any argument documented as "float or Var" may be a
tape variable, which makes it refinable.

Sign conventions: under the ``negative`` convention a wave advances as
exp(-ikz), the refractive index is 1 - delta - i*beta, Fresnel kernels carry
exp(+i pi lambda d nu^2) and far-field propagation is the (unitary) inverse
DFT. The ``positive`` convention flips all three together.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .tensor import ComplexPair, freq_grid

WaveField = ComplexPair

KERNELS = ("paraxial", "sommerfeld_rayleigh")
CONVENTIONS = ("negative", "positive")
REPRESENTATIONS = ("delta_beta", "real_imag")


@dataclass(frozen=True)
class PropagationSpec:
    wavelength: float
    pixel_size: float
    distance: Any = 0.0
    kernel: str = "paraxial"
    sign_convention: str = "negative"

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel size must be positive, got {self.pixel_size}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.sign_convention not in CONVENTIONS:
            raise ValueError(f"unknown sign convention {self.sign_convention!r}")

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi / self.wavelength

    def at(self, distance) -> "PropagationSpec":
        return PropagationSpec(self.wavelength, self.pixel_size, distance, self.kernel, self.sign_convention)


def _sign(convention: str) -> float:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown sign convention {convention!r}")
    return 1.0 if convention == "negative" else -1.0


@lru_cache(maxsize=64)
def _nu2(shape: tuple, pixel_size: float) -> np.ndarray:
    g = freq_grid(shape, pixel_size)
    out = g.nu2
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _unit_freqs(shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    g = freq_grid(shape, 1.0)
    g.nu_y.setflags(write=False)
    g.nu_x.setflags(write=False)
    return g.nu_y, g.nu_x


def fresnel_kernel(spec: PropagationSpec, shape) -> ComplexPair:
    """Transfer function H(nu, d) on the DFT-ordered grid of ``shape``."""
    shape = tuple(int(s) for s in shape[-2:])
    nu2 = _nu2(shape, float(spec.pixel_size))
    s = _sign(spec.sign_convention)
    d = spec.distance
    if spec.kernel == "paraxial":
        phase = ad.mul(d, s * np.pi * spec.wavelength * nu2)
        return ad.expi(phase)
    arg = 1.0 - spec.wavelength**2 * nu2
    propagating = arg > 0
    root = np.sqrt(np.where(propagating, arg, 0.0))
    phase = ad.mul(d, -s * spec.wavenumber * root)
    k = ad.expi(phase)
    zero = np.zeros(shape)
    return ComplexPair(ad.where_mask(propagating, k.re, zero), ad.where_mask(propagating, k.im, zero))


def fresnel_propagate(psi: WaveField, spec: PropagationSpec) -> WaveField:
    """ifft2(fft2(psi) * H); the pixel size is unchanged."""
    h = fresnel_kernel(spec, psi.shape)
    return ad.ifft2(ad.fft2(psi) * h)


def fraunhofer_propagate(psi: WaveField, sign_convention: str = "negative") -> WaveField:
    """Far-field propagation with unitary scaling (energy preserving)."""
    n = psi.shape[-1] * psi.shape[-2]
    if _sign(sign_convention) > 0:
        return ad.ifft2(psi) * float(np.sqrt(n))
    return ad.fft2(psi) * float(1.0 / np.sqrt(n))


def modulate(psi: WaveField, slice2d, representation: str, k: float, dz: float,
             sign_convention: str = "negative") -> WaveField:
    """Multiply ``psi`` by the transmission of one object slice.

    ``slice2d`` is a pair of channel arrays: (Re, Im) of the modulation function
    or (delta, beta) of the refractive index decrement.
    """
    c0, c1 = slice2d
    if representation == "real_imag":
        return psi * ComplexPair(c0, c1)
    if representation != "delta_beta":
        raise ValueError(f"unknown representation {representation!r}")
    s = _sign(sign_convention)
    amp = ad.exp(ad.mul(c1, -k * dz))
    phase = ad.mul(c0, s * k * dz)
    t = ad.expi(phase)
    return psi * ComplexPair(ad.mul(amp, t.re), ad.mul(amp, t.im))


def slice_channels(volume, j: int):
    """(channel0, channel1) of slice ``j`` from a [Ly, Lx, Lz, 2] volume."""
    return ad.slice_(volume, (slice(None), slice(None), j, 0)), ad.slice_(volume, (slice(None), slice(None), j, 1))


def _binned_slices(volume, binning: int):
    lz = volume.shape[2]
    if binning < 1 or lz % binning:
        raise ValueError(f"binning {binning} must divide the number of slices {lz}")
    if binning == 1:
        return [slice_channels(volume, j) for j in range(lz)]
    out = []
    for b in range(lz // binning):
        part = ad.slice_(volume, (slice(None), slice(None), slice(b * binning, (b + 1) * binning)))
        summed = ad.sum_(part, axis=2)
        out.append((ad.slice_(summed, (slice(None), slice(None), 0)), ad.slice_(summed, (slice(None), slice(None), 1))))
    return out


def multislice_propagate(psi: WaveField, volume, spec: PropagationSpec, representation: str,
                         dz: float | None = None, binning: int = 1) -> WaveField:
    """Exit wave of prod_j (P_dz M_j) psi, slice 0 first.

    ``volume`` is [Ly, Lx, Lz, 2]. With ``binning`` > 1 consecutive slices are
    summed (delta/beta only) and the wave propagates ``binning * dz`` per bin.
    """
    if volume.shape[2] == 0:
        raise ValueError("multislice_propagate needs at least one slice")
    dz = spec.pixel_size if dz is None else dz
    if binning > 1 and representation != "delta_beta":
        raise ValueError("slice binning requires the delta_beta representation")
    k = spec.wavenumber
    step = spec.at(dz * binning)
    for chans in _binned_slices(volume, binning):
        psi = modulate(psi, chans, representation, k, dz, spec.sign_convention)
        psi = fresnel_propagate(psi, step)
    return psi


def multislice_sparse(psi: WaveField, slices: Sequence, positions, spec: PropagationSpec,
                      representation: str, dz: float | None = None, exit_distance=0.0) -> WaveField:
    """Modulate/propagate through slices at arbitrary increasing positions.

    ``slices`` is a list of channel pairs, ``positions`` a length-n array or
    Var (refinable). After the last slice the wave travels ``exit_distance``.
    """
    n = len(slices)
    if n == 0:
        raise ValueError("multislice_sparse needs at least one slice")
    pos_val = np.asarray(ad.value_of(positions), dtype=float)
    if pos_val.shape != (n,):
        raise ValueError(f"expected {n} slice positions, got shape {pos_val.shape}")
    if np.any(np.diff(pos_val) <= 0):
        raise ValueError(f"slice positions must be strictly increasing: {pos_val}")
    dz = spec.pixel_size if dz is None else dz
    k = spec.wavenumber
    for j, chans in enumerate(slices):
        psi = modulate(psi, chans, representation, k, dz, spec.sign_convention)
        if j + 1 < n:
            gap = ad.sub(ad.slice_(positions, j + 1), ad.slice_(positions, j))
            psi = fresnel_propagate(psi, spec.at(gap))
    if not (isinstance(exit_distance, (int, float)) and exit_distance == 0):
        psi = fresnel_propagate(psi, spec.at(exit_distance))
    return psi


def project_modulate(psi: WaveField, volume, representation: str, k: float, dz: float,
                     sign_convention: str = "negative") -> WaveField:
    """Single-step modulation by the whole volume (projection approximation)."""
    lz = volume.shape[2]
    if representation == "delta_beta":
        summed = ad.sum_(volume, axis=2) if lz > 1 else ad.slice_(volume, (slice(None), slice(None), 0))
        chans = (ad.slice_(summed, (slice(None), slice(None), 0)), ad.slice_(summed, (slice(None), slice(None), 1)))
        return modulate(psi, chans, representation, k, dz, sign_convention)
    if representation != "real_imag":
        raise ValueError(f"unknown representation {representation!r}")
    for j in range(lz):
        psi = psi * ComplexPair(*slice_channels(volume, j))
    return psi


def fourier_shift(psi: WaveField, shift) -> WaveField:
    """Shift ``psi`` by (dy, dx) pixels via the Fourier shift theorem.

    ``shift`` may be a length-2 array or Var; positive values move content
    towards larger indices.
    """
    nu_y, nu_x = _unit_freqs(tuple(psi.shape[-2:]))
    dy = ad.slice_(shift, 0)
    dx = ad.slice_(shift, 1)
    phase = ad.add(ad.mul(dy, -2 * np.pi * nu_y), ad.mul(dx, -2 * np.pi * nu_x))
    return ad.ifft2(ad.fft2(psi) * ad.expi(phase))


def with_buffer_zone(tile_field: WaveField, pad: int, inner_op: Callable[[WaveField], WaveField]) -> WaveField:
    """Run ``inner_op`` on an edge-replicated padded copy and crop back."""
    pad = int(pad)
    if pad < 0:
        raise ValueError("buffer zone width must be non-negative")
    ny, nx = tile_field.shape[-2:]
    if pad > min(ny, nx):
        raise ValueError(f"buffer zone {pad} larger than tile {ny}x{nx}")
    if pad == 0:
        return inner_op(tile_field)
    lead = [(0, 0)] * (len(tile_field.shape) - 2)
    widths = lead + [(pad, pad), (pad, pad)]
    padded = ComplexPair(ad.pad(tile_field.re, widths, "edge"), ad.pad(tile_field.im, widths, "edge"))
    out = inner_op(padded)
    return ComplexPair(ad.crop(out.re, widths), ad.crop(out.im, widths))


def wavelength_from_energy(energy_ev: float) -> float:
    """Photon wavelength in meters for an energy in eV."""
    from scipy.constants import c, e, h

    return h * c / (e * energy_ev)
