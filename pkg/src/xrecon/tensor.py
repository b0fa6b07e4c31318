"""Real arrays, the complex-as-pair convention, and the FFT contract.

Every array in the package is a float64 numpy array. Complex quantities are
carried as two real arrays (``re``, ``im``); nothing outside of the FFT
provider ever sees an interleaved complex dtype.

FFT normalization: forward transforms are unnormalized, inverse transforms
carry the 1/N factor, so ``ifft2(fft2(x)) == x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

DTYPE = np.float64


class NonFiniteError(ValueError):
    """Raised when an array holds NaN or Inf where finite values are required."""


def as_real(x: Any) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ComplexPair:
    """A complex field held as separate real and imaginary parts.

    ``re`` and ``im`` may be plain arrays or autodiff variables; arithmetic
    dispatches to :mod:`xrecon.autodiff`, which records on a tape only when a
    variable is involved.
    """

    re: Any
    im: Any

    def __post_init__(self):
        if tuple(np.shape(_value(self.re))) != tuple(np.shape(_value(self.im))):
            raise ValueError(
                f"re/im shape mismatch: {np.shape(_value(self.re))} vs {np.shape(_value(self.im))}"
            )

    @classmethod
    def from_complex(cls, z) -> "ComplexPair":
        z = np.asarray(z, dtype=np.complex128)
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    @classmethod
    def ones(cls, shape) -> "ComplexPair":
        return cls(np.ones(shape), np.zeros(shape))

    def to_complex(self) -> np.ndarray:
        return _value(self.re) + 1j * _value(self.im)

    @property
    def shape(self) -> tuple:
        return tuple(np.shape(_value(self.re)))

    def __add__(self, other):
        from . import autodiff as ad

        other = _lift(other)
        return ComplexPair(ad.add(self.re, other.re), ad.add(self.im, other.im))

    def __sub__(self, other):
        from . import autodiff as ad

        other = _lift(other)
        return ComplexPair(ad.sub(self.re, other.re), ad.sub(self.im, other.im))

    def __mul__(self, other):
        from . import autodiff as ad

        if not isinstance(other, ComplexPair):
            # real scalar or real array
            return ComplexPair(ad.mul(self.re, other), ad.mul(self.im, other))
        a, b, c, d = self.re, self.im, other.re, other.im
        return ComplexPair(
            ad.sub(ad.mul(a, c), ad.mul(b, d)),
            ad.add(ad.mul(a, d), ad.mul(b, c)),
        )

    __rmul__ = __mul__

    def conj(self) -> "ComplexPair":
        from . import autodiff as ad

        return ComplexPair(self.re, ad.neg(self.im))

    def abs2(self):
        """|z|^2 as a real array or variable."""
        from . import autodiff as ad

        return ad.add(ad.mul(self.re, self.re), ad.mul(self.im, self.im))

    def __getitem__(self, index) -> "ComplexPair":
        from . import autodiff as ad

        return ComplexPair(ad.slice_(self.re, index), ad.slice_(self.im, index))


def _value(x):
    return getattr(x, "value", x)


def _lift(x) -> ComplexPair:
    if isinstance(x, ComplexPair):
        return x
    z = np.asarray(x)
    if np.iscomplexobj(z):
        return ComplexPair.from_complex(z)
    return ComplexPair(as_real(z), np.zeros_like(as_real(z)))


def complex_mul(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    return a * b


# --- FFT provider -----------------------------------------------------------


def _fft2_raw(re: np.ndarray, im: np.ndarray, inverse: bool) -> tuple[np.ndarray, np.ndarray]:
    check_finite(re, "fft input (re)")
    check_finite(im, "fft input (im)")
    z = re + 1j * im
    out = np.fft.ifft2(z) if inverse else np.fft.fft2(z)
    return np.ascontiguousarray(out.real), np.ascontiguousarray(out.imag)


def fft2(field: ComplexPair) -> ComplexPair:
    """Unnormalized forward DFT over the last two axes."""
    from . import autodiff as ad

    return ad.fft2(field)


def ifft2(field: ComplexPair) -> ComplexPair:
    """Inverse DFT over the last two axes with 1/N normalization."""
    from . import autodiff as ad

    return ad.ifft2(field)


@dataclass(frozen=True)
class FrequencyGrid:
    nu_y: np.ndarray
    nu_x: np.ndarray

    @property
    def nu2(self) -> np.ndarray:
        return self.nu_y**2 + self.nu_x**2


def freq_grid(shape, pixel_size: float) -> FrequencyGrid:
    """DFT-ordered spatial frequencies (cycles per length unit) for a 2D grid."""
    if not pixel_size > 0:
        raise ValueError(f"pixel size must be positive, got {pixel_size}")
    ny, nx = shape[-2], shape[-1]
    fy = np.fft.fftfreq(ny, d=pixel_size)
    fx = np.fft.fftfreq(nx, d=pixel_size)
    nu_y, nu_x = np.meshgrid(fy, fx, indexing="ij")
    return FrequencyGrid(nu_y, nu_x)
