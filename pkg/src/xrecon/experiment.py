"""Glue between configs, datasets, and the reconstruction engine."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import sim
from .config import ConfigError, ReconConfig, sim_spec_class
from .io import Dataset
from .metrics import ResolutionError, affine_error, highpass, phase_ssim, spectrum_resolution, ssim
from .models import Geometry, ModelConfig, make_model
from .params import registry_from_config
from .runtime import Problem, Reconstruction, RunConfig, reconstruct
from .transforms import IDENTITY_AFFINE


def simulate(sim_cfg: dict, seed: int | None = None):
    """Build a synthetic dataset from a ``simulate`` config section; returns (dataset, truth)."""
    cfg = dict(sim_cfg)
    kind = cfg.pop("kind")
    if seed is not None:
        cfg["seed"] = seed
    for k, v in cfg.items():
        if isinstance(v, list):
            cfg[k] = tuple(v)
    spec = sim_spec_class(kind)(**cfg)
    fn = {"mdh": sim.simulate_mdh, "ptycho": sim.simulate_ptycho, "tomography": sim.simulate_tomography}[kind]
    return fn(spec)


def _meta(ds: Dataset, key: str, required: bool = True):
    if key not in ds.metadata:
        if required:
            raise ConfigError(f"dataset metadata lacks {key!r}")
        return None
    return np.asarray(ds.metadata[key])


def initial_params(model_name: str, ds: Dataset) -> dict:
    """Starting values of every parameter a model reads, taken from the dataset metadata."""
    n_angles, n_tiles = ds.data.shape[:2]
    if model_name == "mdh":
        return {"distances": _meta(ds, "distances").astype(float),
                "affine_params": np.tile(IDENTITY_AFFINE, (n_tiles, 1))}
    if model_name in ("ptychography", "sparse_multislice"):
        out = {"probe": _meta(ds, "probe").astype(float),
               "probe_pos_correction": np.zeros((n_tiles, 2))}
        if model_name == "sparse_multislice":
            out["slice_positions"] = _meta(ds, "slice_positions").astype(float)
        return out
    if model_name == "tomography":
        return {"tilts": np.zeros((3, n_angles))}
    raise ConfigError(f"no parameter defaults for model {model_name!r}")


def build_problem(rc: ReconConfig, ds: Dataset, initial_object: np.ndarray | None = None):
    """(Problem, RunConfig) for reconstructing ``ds`` with ``rc``."""
    meta = ds.metadata
    n_angles, n_tiles, ly, lx = ds.data.shape
    pixel = float(_meta(ds, "pixel_size"))
    wavelength = float(_meta(ds, "wavelength"))
    dz = rc.slice_thickness
    if dz is None and "slice_thickness" in meta:
        dz = float(meta["slice_thickness"])
    angles = _meta(ds, "angles", required=False)
    angles = np.zeros(n_angles) if angles is None else angles
    positions = _meta(ds, "positions", required=False)
    windows = _meta(ds, "tile_windows", required=False)
    geometry = Geometry(angles, positions, None if windows is None else [tuple(int(v) for v in w) for w in windows])
    pure = rc.pure_projection if rc.pure_projection is not None else rc.model == "mdh"
    mcfg = ModelConfig(wavelength, pixel, rc.representation, dz, pure, loss=rc.loss, free_distance=rc.free_distance)
    shape = _meta(ds, "object_shape", required=False)
    if shape is not None:
        shape = tuple(int(v) for v in shape)
    if rc.model == "mdh":
        model = make_model("mdh", mcfg, geometry, shape or (ly, lx, 1, 2), n_distances=n_tiles)
    elif rc.model in ("ptychography", "sparse_multislice"):
        probe = _meta(ds, "probe")
        if shape is None:
            n = int(np.ceil(positions.max())) + probe.shape[1]
            shape = (n, n, 1, 2)
        model = make_model(rc.model, mcfg, geometry, shape, probe_shape=probe.shape)
    else:
        if shape is None:
            raise ConfigError("tomography datasets need an object_shape entry in the metadata")
        model = make_model(rc.model, mcfg, geometry, shape)
    initial = initial_params(rc.model, ds)
    initial = {k: v for k, v in initial.items() if k in model.needs + model.uses}
    specs = {k: dict(v) for k, v in rc.params.items()}
    if rc.model == "mdh" and "affine_params" in specs and "mask" not in specs["affine_params"]:
        # the first hologram is the reference frame; shear is not refined by default
        mask = np.ones((n_tiles, 7))
        mask[0] = 0
        mask[:, 1:3] = 0
        specs["affine_params"]["mask"] = mask
    for v in specs.values():
        if isinstance(v.get("step_size"), list):
            v["step_size"] = np.asarray(v["step_size"], dtype=float)
    registry = registry_from_config(specs, initial)
    obj0 = np.zeros(model.object_shape) if initial_object is None else initial_object
    if rc.representation == "real_imag" and initial_object is None:
        obj0[..., 0] = 1.0
    problem = Problem(model, ds.data, registry, obj0)
    run = RunConfig(
        epochs=rc.epochs, batch_size=rc.batch_size, mode=rc.mode, n_ranks=rc.ranks,
        object_optimizer=dict(rc.object_optimizer), regularizers=list(rc.regularizers), support=rc.support,
        nonnegative=rc.nonnegative, checkpoint_dir=rc.checkpoint_dir, resume=rc.resume,
        storage_dtype=rc.storage_dtype, shuffle_seed=rc.shuffle_seed,
    )
    return problem, run


def run(rc: ReconConfig, ds: Dataset, store_path: str | None = None) -> Reconstruction:
    problem, cfg = build_problem(rc, ds)
    if cfg.mode == "h5":
        cfg = dataclasses.replace(cfg, store_path=store_path)
    return reconstruct(problem, cfg)


def mdh_report(recon: Reconstruction, truth: dict, spec: "sim.MDHSimSpec") -> dict:
    """Distance errors, affine errors, and phase SSIM against the high-passed truth."""
    phase = recon.object[:, :, 0, 0]
    hp = highpass(phase, spec.highpass_cutoff, spec.pixel_size)
    out = {
        "magnitude_ssim": ssim(np.exp(-recon.object[:, :, 0, 1]), truth["magnitude"]),
        "distances": recon.registry["distances"].tolist(),
        "distance_error_cm": (100 * np.abs(recon.registry["distances"] - truth["distances"])).tolist(),
        "phase_ssim": phase_ssim(hp, truth["phase_highpass"]),
    }
    if "affine_params" in recon.registry:
        shape = phase.shape
        out["affine_error"] = [affine_error(a, b, shape)
                               for a, b in zip(recon.registry["affine_params"], truth["affine_params"])]
    try:
        out["resolution_cycles_per_px"] = spectrum_resolution(phase)
    except ResolutionError as e:
        out["resolution_cycles_per_px"] = None
        out["resolution_note"] = str(e)
    return out


# per-element Adam steps for [phi, c_x, c_y, s_x, s_y, dx, dy]; shifts are in pixels
AFFINE_STEPS = [1e-4, 0.0, 0.0, 1e-4, 1e-4, 1e-2, 1e-2]


def mdh_recon_config(loss: str = "lsq", epochs: int = 1000, refine_affine: bool = True,
                     refine_distances: bool = True, tv: float = 0.0, object_step: float = 0.01,
                     distance_step: float = 3e-4, n_distances: int = 4, nonnegative: bool = True,
                     **run) -> ReconConfig:
    """Reconstruction settings for a multi-distance holography dataset (all holograms per iteration).

    ``nonnegative`` keeps delta, beta >= 0. Without it, a common shift of all
    distances is absorbed exactly by refocusing the object, and the refined
    distances drift along that direction.
    """
    params = {}
    if refine_distances:
        params["distances"] = {"optimizer": "adam", "step_size": distance_step}
    if refine_affine:
        params["affine_params"] = {"optimizer": "adam", "step_size": list(AFFINE_STEPS)}
    regs = [{"type": "tv", "gamma": tv}] if tv else []
    return ReconConfig(model="mdh", loss=loss, epochs=epochs, batch_size=n_distances,
                       object_optimizer={"name": "adam", "step_size": object_step}, regularizers=regs,
                       params=params, nonnegative=nonnegative, **run)


def run_mdh(spec: "sim.MDHSimSpec", rc: ReconConfig):
    """Simulate, reconstruct, and score one holography experiment; returns (recon, report)."""
    ds, truth = sim.simulate_mdh(spec)
    problem, cfg = build_problem(rc, ds)
    recon = reconstruct(problem, cfg)
    return recon, mdh_report(recon, truth, spec)
