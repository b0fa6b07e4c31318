"""Synthetic phantoms and datasets for the three imaging models.

Every simulator runs the same forward model that reconstruction uses, so a
noiseless dataset is reproduced exactly by the true parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .io import Dataset
from .metrics import highpass
from .models import Geometry, MDHModel, ModelConfig, PtychographyModel, TomographyModel
from .optics import PropagationSpec, fresnel_propagate, wavelength_from_energy
from .tensor import ComplexPair
from .transforms import IDENTITY_AFFINE

# --- phantoms --------------------------------------------------------------------------


def spokes(n: int, n_spokes: int = 24, low: float = 0.6, high: float = 1.0, blur: float = 0.7) -> np.ndarray:
    """Siemens-star pattern between ``low`` and ``high`` inside a disk, ``high`` outside."""
    y, x = np.mgrid[:n, :n] - (n - 1) / 2.0
    r = np.hypot(y, x)
    theta = np.arctan2(y, x)
    star = np.where(np.sin(n_spokes * theta / 2) > 0, low, high)
    img = np.where(r < 0.45 * n, star, high)
    img = gaussian_filter(img, blur) if blur else img
    return np.clip(img, low, high)


def turbulence(n: int, rng: np.random.Generator, amplitude: float = 0.5, exponent: float = 3.0,
               smooth: float = 1.0) -> np.ndarray:
    """Random field with a 1 / f^exponent power spectrum scaled to [-amplitude, amplitude]."""
    f = np.sqrt(np.fft.fftfreq(n)[:, None] ** 2 + np.fft.fftfreq(n)[None, :] ** 2)
    f[0, 0] = 1.0
    spec = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * f ** (-exponent / 2)
    spec[0, 0] = 0.0
    field_ = np.real(np.fft.ifft2(spec))
    if smooth:
        field_ = gaussian_filter(field_, smooth, mode="wrap")
    field_ -= field_.min()
    return amplitude * (2 * field_ / field_.max() - 1)


def blobs(shape, rng: np.random.Generator, n_blobs: int = 6, value=(1e-6, 1e-8)) -> np.ndarray:
    """[Ly, Lx, Lz, 2] delta/beta volume of soft ellipsoids inside the inscribed cylinder."""
    ly, lx, lz = shape
    y, x, z = np.meshgrid(np.arange(ly), np.arange(lx), np.arange(lz), indexing="ij")
    vol = np.zeros(shape)
    for _ in range(n_blobs):
        c = rng.uniform([0.25 * ly, 0.3 * lx, 0.3 * lz], [0.75 * ly, 0.7 * lx, 0.7 * lz])
        r = rng.uniform(0.08, 0.18) * min(lx, lz)
        d2 = ((y - c[0]) ** 2 + (x - c[1]) ** 2 + (z - c[2]) ** 2) / r**2
        vol += rng.uniform(0.5, 1.0) * expit(6 * (1 - d2))
    vol /= max(vol.max(), 1e-12)
    return np.stack([vol * value[0], vol * value[1]], axis=-1)


def poisson_noise(intensity: np.ndarray, photons: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts at ``photons`` per unit intensity, renormalized to intensity units."""
    if photons <= 0:
        raise ValueError("photon count must be positive")
    return rng.poisson(np.maximum(intensity, 0) * photons) / photons


# --- multi-distance holography -----------------------------------------------------------


@dataclass
class MDHSimSpec:
    n: int = 256
    pixel_size: float = 1e-6
    energy_ev: float = 17.5e3
    distances: tuple = (0.40, 0.60, 0.80, 1.00)
    initial_distances: tuple = (0.38, 0.58, 0.78, 0.98)
    photons: float | None = 4000.0  # total per pixel over all holograms; None is noiseless
    distort: bool = True
    max_rotation: float = 0.01  # radians
    max_scale: float = 0.02  # relative, per axis
    max_shift: float = 3.0  # pixels
    n_spokes: int = 24
    seed: int = 0

    def __post_init__(self):
        if len(self.distances) != len(self.initial_distances):
            raise ValueError("distances and initial_distances need the same length")

    @property
    def wavelength(self) -> float:
        return wavelength_from_energy(self.energy_ev)

    @property
    def slice_thickness(self) -> float:
        # k * dz = 1 so the object channels are the phase and the log attenuation directly
        return self.wavelength / (2 * np.pi)

    def model_config(self, loss: str = "lsq") -> ModelConfig:
        return ModelConfig(self.wavelength, self.pixel_size, dz=self.slice_thickness, pure_projection=True,
                           loss=loss)

    @property
    def highpass_cutoff(self) -> float:
        """1 / (4 sqrt(lambda z_mean)) in cycles per metre."""
        return 1.0 / (4.0 * np.sqrt(self.wavelength * float(np.mean(self.distances))))


def random_distortions(n: int, rng: np.random.Generator, max_rotation: float, max_scale: float,
                       max_shift: float) -> np.ndarray:
    """[n, 7] affine parameters: identity for the first, random rotation, scale and shift for the rest."""
    out = np.tile(IDENTITY_AFFINE, (n, 1))
    for i in range(1, n):
        out[i, 0] = rng.uniform(-max_rotation, max_rotation)
        out[i, 3:5] = 1 + rng.uniform(-max_scale, max_scale, 2)
        out[i, 5:7] = rng.uniform(-max_shift, max_shift, 2)
    return out


def mdh_object(spec: MDHSimSpec, rng: np.random.Generator):
    """(object [n, n, 1, 2], magnitude, phase) for a spokes magnitude and turbulent phase."""
    mag = spokes(spec.n, spec.n_spokes)
    phase = turbulence(spec.n, rng)
    phase -= phase.min()  # delta >= 0 away from absorption edges; a constant offset leaves holograms unchanged
    obj = np.stack([phase, -np.log(mag)], axis=-1)[:, :, None, :]
    return obj, mag, phase


def mdh_model(spec: MDHSimSpec, loss: str = "lsq") -> MDHModel:
    return MDHModel(spec.model_config(loss), Geometry(np.zeros(1)), (spec.n, spec.n, 1, 2), len(spec.distances))


def simulate_mdh(spec: MDHSimSpec):
    """Holograms of a thin object at several distances.

    Returns ``(dataset, truth)``. The dataset holds the (noisy, distorted)
    holograms and the initial distance guesses; ``truth`` holds the object,
    its magnitude and phase, the true distances and distortions, and the
    high-passed phase used as the comparison reference.
    """
    rng = np.random.default_rng(spec.seed)
    obj, mag, phase = mdh_object(spec, rng)
    n_dist = len(spec.distances)
    affine = (random_distortions(n_dist, rng, spec.max_rotation, spec.max_scale, spec.max_shift)
              if spec.distort else np.tile(IDENTITY_AFFINE, (n_dist, 1)))
    model = mdh_model(spec)
    params = {"distances": np.asarray(spec.distances, dtype=float), "affine_params": affine}
    holos = np.stack(model.forward(obj, params, 0, list(range(n_dist))))
    if spec.photons is not None:
        holos = poisson_noise(holos, spec.photons / n_dist, rng)
    ds = Dataset(holos[None], {
        "energy_ev": spec.energy_ev,
        "wavelength": spec.wavelength,
        "pixel_size": spec.pixel_size,
        "slice_thickness": spec.slice_thickness,
        "distances": np.asarray(spec.initial_distances, dtype=float),
        "angles": np.zeros(1),
    })
    truth = {
        "object": obj,
        "magnitude": mag,
        "phase": phase,
        "distances": np.asarray(spec.distances, dtype=float),
        "affine_params": affine,
        "phase_highpass": highpass(phase, spec.highpass_cutoff, spec.pixel_size),
    }
    return ds, truth


# --- ptychography ------------------------------------------------------------------------


def make_probe(n: int, kind: str = "gaussian", width: float | None = None, defocus: float = 0.0,
               spec: PropagationSpec | None = None, modes: int = 1, rng: np.random.Generator | None = None):
    """[modes, n, n, 2] probe.

    ``kind`` is "gaussian" (1/e^2 radius ``width`` pixels) or "annulus" (a
    ring between 0.25 and 0.45 of the window). A nonzero ``defocus`` (metres)
    propagates the probe with ``spec``. Extra modes are weaker perturbed copies.
    """
    y, x = np.mgrid[:n, :n] - (n - 1) / 2.0
    r = np.hypot(y, x)
    if kind == "gaussian":
        w = n / 4 if width is None else width
        amp = np.exp(-(r**2) / w**2)
    elif kind == "annulus":
        amp = gaussian_filter(((r > 0.25 * n / 2) & (r < 0.45 * n)).astype(float), 1.0)
    else:
        raise ValueError(f"unknown probe kind {kind!r}")
    psi = ComplexPair.from_complex(amp.astype(complex))
    if defocus:
        if spec is None:
            raise ValueError("defocusing the probe needs a propagation spec")
        psi = fresnel_propagate(psi, spec.at(defocus))
    base = psi.to_complex()
    rng = np.random.default_rng(0) if rng is None else rng
    out = [base]
    for m in range(1, modes):
        pert = gaussian_filter(rng.standard_normal((n, n)), 2) + 1j * gaussian_filter(rng.standard_normal((n, n)), 2)
        out.append(0.3 / m * base * (1 + pert))
    return np.stack([np.stack([z.real, z.imag], -1) for z in out])


def raster_positions(object_n: int, probe_n: int, step: int) -> np.ndarray:
    """Top-left corners of a square raster that keeps the probe inside the object."""
    starts = np.arange(0, object_n - probe_n + 1, step)
    yy, xx = np.meshgrid(starts, starts, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)


@dataclass
class PtychoSimSpec:
    object_n: int = 64
    probe_n: int = 32
    step: int = 6
    lz: int = 1
    pixel_size: float = 10e-9
    energy_ev: float = 10e3
    probe_kind: str = "gaussian"
    probe_width: float | None = None
    defocus: float = 0.0
    max_position_error: float = 2.0  # pixels
    photons: float | None = None  # per unit of the brightest diffraction pixel; None is noiseless
    phase_amplitude: float = 0.5
    seed: int = 0

    @property
    def wavelength(self) -> float:
        return wavelength_from_energy(self.energy_ev)

    def model_config(self, loss: str = "lsq") -> ModelConfig:
        # the slice thickness is chosen so the object holds phase and log attenuation
        dz = self.wavelength / (2 * np.pi) / self.lz
        return ModelConfig(self.wavelength, self.pixel_size, dz=dz, pure_projection=self.lz == 1, loss=loss)


def ptycho_object(spec: PtychoSimSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.object_n
    mag = spokes(n, 12, 0.8, 1.0)
    phase = turbulence(n, rng, spec.phase_amplitude)
    slab = np.stack([phase, -np.log(mag)], axis=-1) / spec.lz
    return np.repeat(slab[:, :, None, :], spec.lz, axis=2)


def simulate_ptycho(spec: PtychoSimSpec):
    """Far-field diffraction patterns from a raster scan with random position errors.

    The recorded positions are the nominal raster; the patterns come from
    the nominal positions plus the errors stored in ``truth``.
    """
    rng = np.random.default_rng(spec.seed)
    obj = ptycho_object(spec, rng)
    nominal = raster_positions(spec.object_n, spec.probe_n, spec.step)
    errors = rng.uniform(-spec.max_position_error, spec.max_position_error, nominal.shape)
    cfg = spec.model_config()
    probe = make_probe(spec.probe_n, spec.probe_kind, spec.probe_width, spec.defocus, cfg.spec)
    shape = (spec.object_n, spec.object_n, spec.lz, 2)
    model = PtychographyModel(cfg, Geometry(np.zeros(1), nominal), shape, probe.shape)
    params = {"probe": probe, "probe_pos_correction": errors}
    patterns = np.stack(model.forward(obj, params, 0, list(range(len(nominal)))))
    if spec.photons is not None:
        patterns = poisson_noise(patterns / patterns.max(), spec.photons, rng) * patterns.max()
    ds = Dataset(patterns[None], {
        "energy_ev": spec.energy_ev,
        "wavelength": spec.wavelength,
        "pixel_size": spec.pixel_size,
        "positions": nominal,
        "probe": probe,
        "slice_thickness": cfg.slice_thickness,
        "object_shape": np.array(shape),
        "angles": np.zeros(1),
    })
    return ds, {"object": obj, "probe": probe, "position_errors": errors}


# --- tomography --------------------------------------------------------------------------


@dataclass
class TomoSimSpec:
    shape: tuple = (8, 24, 24)  # Ly, Lx, Lz
    n_angles: int = 12
    pixel_size: float = 1e-6
    energy_ev: float = 10e3
    tiles: tuple = (1, 2)  # tile grid over each projection
    free_distance: float = 0.0
    pure_projection: bool = True
    seed: int = 0
    angles: np.ndarray | None = field(default=None)

    @property
    def wavelength(self) -> float:
        return wavelength_from_energy(self.energy_ev)

    def tile_windows(self):
        from .io import tile_image

        _, tiling = tile_image(np.zeros(self.shape[:2]), *self.tiles)
        return tiling.windows

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.wavelength, self.pixel_size, pure_projection=self.pure_projection,
                           free_distance=self.free_distance)


def simulate_tomography(spec: TomoSimSpec):
    """Tiled projections of a blob volume over a half turn."""
    rng = np.random.default_rng(spec.seed)
    angles = np.linspace(0, np.pi, spec.n_angles, endpoint=False) if spec.angles is None else spec.angles
    obj = blobs(spec.shape, rng)
    windows = spec.tile_windows()
    model = TomographyModel(spec.model_config(), Geometry(angles, tile_windows=windows), spec.shape + (2,))
    ty = max(w[1] - w[0] for w in windows)
    tx = max(w[3] - w[2] for w in windows)
    data = np.zeros((len(angles), len(windows), ty, tx))
    for a in range(len(angles)):
        for t, img in enumerate(model.forward(obj, {}, a, list(range(len(windows))))):
            data[a, t, : img.shape[0], : img.shape[1]] = img
    ds = Dataset(data, {
        "energy_ev": spec.energy_ev,
        "wavelength": spec.wavelength,
        "pixel_size": spec.pixel_size,
        "angles": angles,
        "tile_windows": np.asarray(windows),
        "object_shape": np.array(spec.shape + (2,)),
    })
    return ds, {"object": obj}
