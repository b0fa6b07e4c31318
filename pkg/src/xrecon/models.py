"""Forward models mapping an object (plus refinable parameters) to detector
intensities, and the data-mismatch losses.

Every model exposes the same contract so the runtime can drive any of them:

* ``rotate_object(obj, params, angle)`` brings the object into the viewing
  frame of one angle (identity for single-angle models).
* ``chunk_window(angle, tiles)`` names the (y0, y1, x0, x1) region of the
  rotated object that a set of tiles reads.
* ``predict(chunk, params, angle, tiles, origin)`` returns one predicted
  intensity per tile from a chunk whose top-left corner sits at ``origin``.

Objects are [Ly, Lx, Lz, C] arrays or Vars. ``params`` maps parameter names
to arrays or Vars; missing optional parameters take their neutral value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optics import (
    PropagationSpec,
    fourier_shift,
    fraunhofer_propagate,
    fresnel_propagate,
    multislice_propagate,
    multislice_sparse,
    project_modulate,
    slice_channels,
)
from .tensor import ComplexPair
from .transforms import apply_affine_params, rotate, vacuum_fill

EPS = 1e-9
LOSSES = ("lsq", "poisson")


class FootprintError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    wavelength: float
    pixel_size: float
    representation: str = "delta_beta"
    dz: float | None = None  # slice thickness; defaults to the pixel size
    pure_projection: bool = False
    kernel: str = "paraxial"
    sign_convention: str = "negative"
    kappa_mode: bool = False
    loss: str = "lsq"
    free_distance: float = 0.0
    binning: int = 1

    def __post_init__(self):
        if self.kappa_mode and self.representation != "delta_beta":
            raise ValueError("kappa mode requires the delta_beta representation")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.representation not in ("delta_beta", "real_imag"):
            raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def slice_thickness(self) -> float:
        return self.pixel_size if self.dz is None else self.dz

    @property
    def spec(self) -> PropagationSpec:
        return PropagationSpec(self.wavelength, self.pixel_size, 0.0, self.kernel, self.sign_convention)

    @property
    def channels(self) -> int:
        return 1 if self.kappa_mode else 2


@dataclass
class Geometry:
    """Acquisition geometry shared by all tiles of a dataset.

    ``positions`` are probe-footprint top-left corners in object pixels
    (row, col), possibly fractional. ``tile_windows`` are (y0, y1, x0, x1)
    regions of the projection plane for full-field tiled data.
    """

    angles: np.ndarray = field(default_factory=lambda: np.zeros(1))
    positions: np.ndarray | None = None
    tile_windows: list | None = None

    def __post_init__(self):
        self.angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)


# --- intensity and losses -------------------------------------------------------------


def multimode_intensity(fields: list[ComplexPair]):
    """Incoherent sum of |psi_i|^2 over probe modes."""
    total = fields[0].abs2()
    for f in fields[1:]:
        total = ad.add(total, f.abs2())
    return total


def _check_measured(i_meas):
    i_meas = np.asarray(i_meas, dtype=float)
    if np.any(i_meas < 0):
        raise ValueError("measured intensity has negative values")
    return i_meas


def mismatch_sum(kind: str, i_pred, i_meas):
    """Pixel-summed mismatch; dividing by the pixel count gives the loss."""
    i_meas = _check_measured(i_meas)
    if kind == "lsq":
        r = ad.sub(ad.sqrt(ad.add(i_pred, EPS)), np.sqrt(i_meas + EPS))
        return ad.sum_(ad.mul(r, r))
    if kind == "poisson":
        return ad.sum_(ad.sub(i_pred, ad.mul(i_meas, ad.log(ad.add(i_pred, EPS)))))
    raise ValueError(f"unknown loss {kind!r}")


def loss_lsq(i_pred, i_meas):
    return ad.div(mismatch_sum("lsq", i_pred, i_meas), float(np.size(i_meas)))


def loss_poisson(i_pred, i_meas):
    return ad.div(mismatch_sum("poisson", i_pred, i_meas), float(np.size(i_meas)))


def assemble_loss(mismatch, regs, obj):
    """D + sum_i alpha_i R_i(obj) for ``regs`` = [(alpha_i, R_i), ...]."""
    total = mismatch
    for alpha, reg in regs:
        if alpha < 0:
            raise ValueError("regularizer weights must be non-negative")
        if alpha:
            total = ad.add(total, ad.mul(alpha, reg(obj)))
    return total


# --- models ----------------------------------------------------------------------------


def _is_zero(x) -> bool:
    return not isinstance(x, ad.Var) and np.all(np.asarray(x) == 0)


def _probe_modes(probe) -> list[ComplexPair]:
    n = probe.shape[0]
    return [ComplexPair(ad.slice_(probe, (m, Ellipsis, 0)), ad.slice_(probe, (m, Ellipsis, 1))) for m in range(n)]


class ForwardModel:
    name = "base"
    needs: tuple = ()  # parameters that must be present
    uses: tuple = ()  # optional parameters the model reads

    def __init__(self, config: ModelConfig, geometry: Geometry, object_shape):
        self.config = config
        self.geometry = geometry
        self.object_shape = tuple(int(s) for s in object_shape)
        if len(self.object_shape) != 4:
            raise ValueError(f"object shape must be [Ly, Lx, Lz, C], got {self.object_shape}")
        if self.object_shape[3] != config.channels:
            raise ValueError(f"object needs {config.channels} channel(s), shape is {self.object_shape}")

    @property
    def n_angles(self) -> int:
        return len(self.geometry.angles)

    @property
    def n_tiles(self) -> int:
        raise NotImplementedError

    def check_params(self, params: dict) -> None:
        missing = [n for n in self.needs if n not in params]
        if missing:
            raise KeyError(f"{self.name} model needs parameters {missing}")
        extra = [n for n in params if n not in self.needs + self.uses]
        if extra:
            raise KeyError(f"{self.name} model does not use parameters {extra}")

    # geometry ---------------------------------------------------------------

    def rotation_angle(self, params: dict, angle: int):
        """Rotation about y for ``angle``: nominal angle plus the refined tilt."""
        theta = float(self.geometry.angles[angle])
        tilts = params.get("tilts")
        if tilts is not None:
            t = ad.slice_(tilts, (0, angle))
            return t + theta if isinstance(t, ad.Var) else float(t) + theta
        return theta

    def rotate_object(self, obj, params: dict, angle: int):
        fill = vacuum_fill(self.config.representation, self.object_shape[3])
        theta = self.rotation_angle(params, angle)
        if not _is_zero(theta):
            obj = rotate(obj, theta, "y", fill)
        tilts = params.get("tilts")
        if tilts is not None:
            for row, axis in ((1, "x"), (2, "z")):
                t = ad.slice_(tilts, (row, angle))
                if not _is_zero(t):
                    obj = rotate(obj, t, axis, fill)
        return obj

    def tile_window(self, angle: int, tile: int) -> tuple[int, int, int, int]:
        raise NotImplementedError

    def chunk_window(self, angle: int, tiles) -> tuple[int, int, int, int]:
        wins = np.array([self.tile_window(angle, t) for t in tiles])
        return int(wins[:, 0].min()), int(wins[:, 1].max()), int(wins[:, 2].min()), int(wins[:, 3].max())

    def _crop(self, chunk, window, origin, tile):
        y0, y1, x0, x1 = window
        oy, ox = origin
        ch, cw = chunk.shape[:2]
        if y0 - oy < 0 or x0 - ox < 0 or y1 - oy > ch or x1 - ox > cw:
            raise FootprintError(
                f"tile {tile}: footprint rows {y0}:{y1}, cols {x0}:{x1} lies outside the "
                f"object region rows {oy}:{oy + ch}, cols {ox}:{ox + cw}"
            )
        if (y0 - oy, x0 - ox) == (0, 0) and (y1 - y0, x1 - x0) == (ch, cw):
            return chunk
        return ad.slice_(chunk, (slice(y0 - oy, y1 - oy), slice(x0 - ox, x1 - ox)))

    def expand_channels(self, obj, params: dict):
        """Two-channel view of the object; in kappa mode delta = beta / kappa."""
        if not self.config.kappa_mode:
            return obj
        kappa_log = params["kappa_log"]
        if not np.all(np.isfinite(ad.value_of(kappa_log))):
            raise ValueError("kappa is not finite")
        beta = ad.slice_(obj, (Ellipsis, slice(0, 1)))
        delta = ad.mul(beta, ad.exp(ad.neg(kappa_log)))
        return ad.concat([delta, beta], axis=3)

    # prediction -------------------------------------------------------------

    def predict(self, chunk, params: dict, angle: int, tiles, origin=(0, 0)) -> list:
        raise NotImplementedError

    def forward(self, obj, params: dict, angle: int, tiles) -> list:
        """Predicted intensities for ``tiles`` from the unrotated full object."""
        return self.predict(self.rotate_object(obj, params, angle), params, angle, tiles)

    def measured(self, data: np.ndarray, angle: int, tile: int) -> np.ndarray:
        """The part of ``data[angle, tile]`` that the prediction covers."""
        return data[angle, tile]

    def mismatch(self, predictions: list, data: np.ndarray, angle: int, tiles):
        total = 0.0
        for pred, t in zip(predictions, tiles):
            total = ad.add(total, mismatch_sum(self.config.loss, pred, self.measured(data, angle, t)))
        return total

    def n_pixels(self, data: np.ndarray, angle: int, tiles) -> int:
        return int(sum(self.measured(data, angle, t).size for t in tiles))


class _ProbeModel(ForwardModel):
    """Shared probe handling for the scanning models."""

    def __init__(self, config, geometry, object_shape, probe_shape):
        super().__init__(config, geometry, object_shape)
        if geometry.positions is None:
            raise ValueError(f"{self.name} model needs probe positions")
        self.probe_shape = tuple(int(s) for s in probe_shape)
        self.int_positions = np.round(geometry.positions).astype(int)
        self.residuals = geometry.positions - self.int_positions

    @property
    def n_tiles(self) -> int:
        return len(self.int_positions)

    def tile_window(self, angle, tile):
        ly, lx = self.probe_shape[1:3]
        y0, x0 = self.int_positions[tile]
        return int(y0), int(y0 + ly), int(x0), int(x0 + lx)

    def _shift(self, params, angle, tile):
        shift = self.residuals[tile]
        corr = params.get("probe_pos_correction")
        if corr is not None:
            shift = ad.add(ad.slice_(corr, tile), shift)
        off = params.get("cross_angle_offsets")
        if off is not None:
            shift = ad.add(ad.slice_(off, angle), shift)
        return shift

    def _probe_at(self, params, angle, tile) -> list[ComplexPair]:
        modes = _probe_modes(params["probe"])
        shift = self._shift(params, angle, tile)
        if not _is_zero(shift):
            modes = [fourier_shift(m, shift) for m in modes]
        defocus = params.get("defocus")
        if defocus is not None:
            d = ad.slice_(defocus, angle)
            if not _is_zero(d):
                modes = [fresnel_propagate(m, self.config.spec.at(d)) for m in modes]
        return modes

    def _exit_wave(self, psi, chunk_t, params):
        raise NotImplementedError

    def predict(self, chunk, params, angle, tiles, origin=(0, 0)):
        chunk = self.expand_channels(chunk, params)
        out = []
        for t in tiles:
            chunk_t = self._crop(chunk, self.tile_window(angle, t), origin, t)
            fields = []
            for psi in self._probe_at(params, angle, t):
                exit_wave = self._exit_wave(psi, chunk_t, params)
                fields.append(fraunhofer_propagate(exit_wave, self.config.sign_convention))
            out.append(multimode_intensity(fields))
        return out


class PtychographyModel(_ProbeModel):
    """Far-field (multislice) ptychography."""

    name = "ptychography"
    needs = ("probe",)
    uses = ("probe_pos_correction", "defocus", "tilts", "cross_angle_offsets", "kappa_log")

    def _exit_wave(self, psi, chunk_t, params):
        c = self.config
        if c.pure_projection:
            return project_modulate(psi, chunk_t, c.representation, c.spec.wavenumber, c.slice_thickness,
                                    c.sign_convention)
        return multislice_propagate(psi, chunk_t, c.spec, c.representation, c.slice_thickness, c.binning)


class SparseMultisliceModel(_ProbeModel):
    """Ptychography through a few thin slices at refinable axial positions."""

    name = "sparse_multislice"
    needs = ("probe", "slice_positions")
    uses = ("probe_pos_correction", "defocus", "kappa_log")

    def __init__(self, config, geometry, object_shape, probe_shape):
        super().__init__(config, geometry, object_shape, probe_shape)
        if object_shape[2] < 2:
            raise ValueError("sparse multislice needs at least two slices")

    def rotate_object(self, obj, params, angle):
        return obj

    def _exit_wave(self, psi, chunk_t, params):
        c = self.config
        slices = [slice_channels(chunk_t, j) for j in range(chunk_t.shape[2])]
        return multislice_sparse(psi, slices, params["slice_positions"], c.spec, c.representation,
                                 c.slice_thickness)


class TomographyModel(ForwardModel):
    """Full-field projection tomography; tiles are regions of each projection."""

    name = "tomography"
    uses = ("tilts", "kappa_log")

    def __init__(self, config, geometry, object_shape):
        super().__init__(config, geometry, object_shape)
        if geometry.tile_windows is None:
            geometry.tile_windows = [(0, object_shape[0], 0, object_shape[1])]

    @property
    def n_tiles(self):
        return len(self.geometry.tile_windows)

    def tile_window(self, angle, tile):
        return tuple(int(v) for v in self.geometry.tile_windows[tile])

    def measured(self, data, angle, tile):
        y0, y1, x0, x1 = self.tile_window(angle, tile)
        return data[angle, tile, : y1 - y0, : x1 - x0]

    def predict(self, chunk, params, angle, tiles, origin=(0, 0)):
        c = self.config
        chunk = self.expand_channels(chunk, params)
        out = []
        for t in tiles:
            chunk_t = self._crop(chunk, self.tile_window(angle, t), origin, t)
            psi = ComplexPair.ones(chunk_t.shape[:2])
            if c.pure_projection:
                psi = project_modulate(psi, chunk_t, c.representation, c.spec.wavenumber, c.slice_thickness,
                                       c.sign_convention)
            else:
                psi = multislice_propagate(psi, chunk_t, c.spec, c.representation, c.slice_thickness, c.binning)
            if c.free_distance:
                psi = fresnel_propagate(psi, c.spec.at(c.free_distance))
            out.append(psi.abs2())
        return out


class MDHModel(ForwardModel):
    """Multi-distance near-field holography of a thin object.

    Tile ``t`` of the single angle is the hologram at distance ``t``. The
    affine parameters warp the predicted intensity into the frame of the
    (possibly misaligned) measurement.
    """

    name = "mdh"
    needs = ("distances",)
    uses = ("affine_params", "kappa_log")

    def __init__(self, config, geometry, object_shape, n_distances: int):
        super().__init__(config, geometry, object_shape)
        self.n_distances = int(n_distances)

    @property
    def n_tiles(self):
        return self.n_distances

    def rotate_object(self, obj, params, angle):
        return obj

    def tile_window(self, angle, tile):
        return 0, self.object_shape[0], 0, self.object_shape[1]

    def predict(self, chunk, params, angle, tiles, origin=(0, 0)):
        c = self.config
        obj = self.expand_channels(chunk, params)
        psi = ComplexPair.ones(obj.shape[:2])
        exit_wave = project_modulate(psi, obj, c.representation, c.spec.wavenumber, c.slice_thickness,
                                     c.sign_convention)
        out = []
        for t in tiles:
            d = ad.slice_(params["distances"], t)
            intensity = fresnel_propagate(exit_wave, c.spec.at(d)).abs2()
            affine = params.get("affine_params")
            if affine is not None:
                intensity = apply_affine_params(intensity, ad.slice_(affine, t), fill=1.0)
            out.append(intensity)
        return out


MODELS = {
    "ptychography": PtychographyModel,
    "mdh": MDHModel,
    "sparse_multislice": SparseMultisliceModel,
    "tomography": TomographyModel,
}


def make_model(name: str, config: ModelConfig, geometry: Geometry, object_shape, **kwargs) -> ForwardModel:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(MODELS)}") from None
    return cls(config, geometry, object_shape, **kwargs)


def register_model(name: str, cls) -> None:
    """Plug in a custom model class that follows the ForwardModel contract."""
    if name in MODELS:
        raise ValueError(f"model {name!r} is already registered")
    MODELS[name] = cls
