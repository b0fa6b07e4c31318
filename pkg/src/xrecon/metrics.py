"""Image-quality metrics: global SSIM and power-spectrum resolution."""

from __future__ import annotations

import numpy as np

from scipy.ndimage import gaussian_filter

from .transforms import affine_matrix, AffineParams, d_affine, normalized_affine

K1, K2 = 0.01, 0.03


class ResolutionError(ValueError):
    pass


def normalize_phase(phase: np.ndarray) -> np.ndarray:
    phase = np.asarray(phase, dtype=float)
    sd = phase.std()
    return phase - phase.mean() if sd == 0 else (phase - phase.mean()) / sd


def ssim(image: np.ndarray, reference: np.ndarray, dynamic_range: float | None = None) -> float:
    """Global structural similarity l * c * s of ``image`` against ``reference``.

    The dynamic range defaults to max - min of the reference.
    """
    a = np.asarray(image, dtype=float)
    r = np.asarray(reference, dtype=float)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {r.shape}")
    mu_a, mu_r = a.mean(), r.mean()
    var_a, var_r = a.var(), r.var()
    if var_a == 0 and var_r == 0:
        return 1.0
    cov = np.mean((a - mu_a) * (r - mu_r))
    L = float(r.max() - r.min()) if dynamic_range is None else float(dynamic_range)
    if L == 0:
        L = 1.0
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    c3 = c2 / 2
    sd_a, sd_r = np.sqrt(var_a), np.sqrt(var_r)
    lum = (2 * mu_a * mu_r + c1) / (mu_a**2 + mu_r**2 + c1)
    con = (2 * sd_a * sd_r + c2) / (var_a + var_r + c2)
    struct = (cov + c3) / (sd_a * sd_r + c3)
    return float(lum * con * struct)


def phase_ssim(phase: np.ndarray, reference_phase: np.ndarray) -> float:
    """SSIM after normalizing both phases to zero mean and unit variance."""
    return ssim(normalize_phase(phase), normalize_phase(reference_phase))


def power_spectrum(data: np.ndarray, axis: int | None = None, pixel_size: float = 1.0):
    """(frequencies, power) with frequencies in cycles per unit length.

    A 2-D image without ``axis`` gives the radially averaged spectrum; with
    ``axis`` the 1-D spectra along that axis are averaged over the others.
    """
    data = np.asarray(data, dtype=float)
    data = data - data.mean()
    if axis is not None:
        n = data.shape[axis]
        p = np.abs(np.fft.rfft(data, axis=axis)) ** 2
        p = np.moveaxis(p, axis, 0).reshape(p.shape[axis], -1).mean(axis=1)
        f = np.fft.rfftfreq(n, pixel_size)
        return f[1:], p[1:]
    if data.ndim != 2:
        raise ValueError("radial averaging needs a 2-D image; pass axis for volumes")
    ny, nx = data.shape
    p = np.abs(np.fft.fft2(data)) ** 2
    fy = np.fft.fftfreq(ny)
    fx = np.fft.fftfreq(nx)
    rad = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    n = min(ny, nx)
    bins = np.round(rad * n).astype(int)
    keep = (bins >= 1) & (bins <= n // 2)
    sums = np.bincount(bins[keep], p[keep], minlength=n // 2 + 1)
    counts = np.bincount(bins[keep], minlength=n // 2 + 1)
    idx = np.arange(1, n // 2 + 1)
    return idx / (n * pixel_size), sums[idx] / np.maximum(counts[idx], 1)


def spectrum_resolution(data: np.ndarray, axis: int | None = None, pixel_size: float = 1.0,
                        fit_lo=(0.008, 0.31), fit_hi=(0.47, 1.0), parallel_tol: float = 0.5) -> float:
    """Frequency where log-log line fits to a low band and a high band meet.

    Bands are fractions of the Nyquist frequency 1 / (2 * pixel_size). The
    low band follows the signal's decay, the high band the noise floor; their
    intersection marks where signal gives way to noise.
    """
    f, p = power_spectrum(data, axis, pixel_size)
    f_ny = 0.5 / pixel_size
    lines = []
    for lo, hi in (fit_lo, fit_hi):
        sel = (f >= lo * f_ny) & (f <= hi * f_ny) & (p > 0)
        if sel.sum() < 2:
            raise ResolutionError(f"fewer than two spectrum samples in band {lo}-{hi} f_Ny")
        lines.append(np.polyfit(np.log10(f[sel]), np.log10(p[sel]), 1))
    (a1, b1), (a2, b2) = lines
    if abs(a1 - a2) < parallel_tol:
        raise ResolutionError(f"fitted lines are nearly parallel (slopes {a1:.3f}, {a2:.3f}); no intersection")
    return float(10 ** ((b2 - b1) / (a1 - a2)))


def highpass(image: np.ndarray, cutoff: float, pixel_size: float = 1.0, sigma: float = 2.5) -> np.ndarray:
    """Remove spatial frequencies below ``cutoff`` (cycles per unit length).

    The binary frequency mask is smoothed by a Gaussian of ``sigma``
    frequency-grid pixels to avoid ringing.
    """
    image = np.asarray(image, dtype=float)
    ny, nx = image.shape
    fy = np.fft.fftfreq(ny, pixel_size)
    fx = np.fft.fftfreq(nx, pixel_size)
    rad = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    mask = np.fft.fftshift((rad >= cutoff).astype(float))
    mask = np.fft.ifftshift(gaussian_filter(mask, sigma, mode="nearest"))
    return np.real(np.fft.ifft2(np.fft.fft2(image) * mask))


def affine_error(refined_params, true_params, shape) -> float:
    """Affine distance between the inverse of a refined warp and the true warp.

    Both warps are given as 7-element parameter vectors in pixel units and
    compared in unit-image coordinates.
    """
    a_r = normalized_affine(affine_matrix(AffineParams.from_array(refined_params)), shape)
    a_0 = normalized_affine(affine_matrix(AffineParams.from_array(true_params)), shape)
    return d_affine(np.linalg.inv(a_r), a_0)
