"""The reconstruction loop shared by every execution mode.

A run is a sequence of iterations from :func:`schedule`. In each iteration
every rank computes the data-mismatch gradient of its tiles, the gradients
are summed across ranks, regularizer gradients are added, and one update is
applied to the object and to every enabled parameter. The modes differ only
in where the object lives, which is delegated to a backend:

* replicated (serial, dp): every rank holds the full object;
* slab (do): rank r holds a y-slab and exchanges chunks with alltoall;
* file (h5): the object lives in an HDF5 file read and written by slices.

The data term of an iteration is the pixel sum of the mismatch over all of
its tiles divided by the total pixel count, so its value and gradient do
not depend on how tiles are distributed over ranks.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .. import autodiff as ad
from ..models import ForwardModel
from ..optimizers import CG, Optimizer, make_optimizer
from ..params import ParamRegistry
from ..regularizers import ReweightedL1, SupportMask, _channels, apply_support, make_regularizer, shrink_wrap
from .checkpoint import Checkpoint, checkpoint_path, latest_checkpoint, load_checkpoint, save_checkpoint
from .comm import Comm, WorkerGroup
from .schedule import schedule

log = logging.getLogger(__name__)

MODES = ("serial", "dp", "do", "h5")


class DivergenceError(RuntimeError):
    pass


@dataclass
class RunConfig:
    epochs: int = 1
    batch_size: int = 1
    mode: str = "serial"
    n_ranks: int = 1
    object_optimizer: dict = field(default_factory=lambda: {"name": "adam", "step_size": 1e-3})
    regularizers: list = field(default_factory=list)
    support: dict | None = None  # {"threshold", "sigma", "every"} enables shrink-wrap
    nonnegative: bool = False
    checkpoint_dir: str | None = None
    resume: bool = False
    storage_dtype: str = "float64"
    store_path: str | None = None
    shuffle_seed: int | None = None
    memory_audit: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "serial" and self.n_ranks != 1:
            raise ValueError("serial mode runs on exactly one rank")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.storage_dtype not in ("float32", "float64"):
            raise ValueError("storage dtype must be float32 or float64")
        if self.object_optimizer.get("name") == "cg" and self.mode != "serial":
            raise ValueError("the conjugate-gradient object update is only available in serial mode")
        if self.mode in ("do", "h5"):
            for r in self.regularizers:
                if r["type"] == "tv":
                    raise ValueError(f"total variation couples slabs and is not supported in {self.mode!r} mode")
            if self.support is not None:
                raise ValueError(f"shrink-wrap support is not supported in {self.mode!r} mode")


@dataclass
class Problem:
    model: ForwardModel
    data: np.ndarray  # [num_angles, num_tiles, ly, lx]
    registry: ParamRegistry
    initial_object: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 4:
            raise ValueError(f"data must be 4-D [angles, tiles, y, x], got shape {self.data.shape}")
        if self.data.shape[:2] != (self.model.n_angles, self.model.n_tiles):
            raise ValueError(
                f"data has {self.data.shape[:2]} (angles, tiles) but the model expects "
                f"{(self.model.n_angles, self.model.n_tiles)}"
            )
        self.initial_object = np.array(self.initial_object, dtype=float)
        if self.initial_object.shape != self.model.object_shape:
            raise ValueError(f"object shape {self.initial_object.shape} != model shape {self.model.object_shape}")


@dataclass
class Reconstruction:
    object: np.ndarray
    registry: ParamRegistry
    log: list
    epochs_done: int
    support: np.ndarray | None = None
    audit: dict | None = None


# --- helpers ---------------------------------------------------------------------------


def model_params(problem: Problem, values: dict) -> dict:
    m = problem.model
    return {n: v for n, v in values.items() if n in m.needs + m.uses}


def local_data_gradient(model: ForwardModel, data, obj, params: dict, enabled, angle, tiles, n_px,
                        origin=None, rotate=True):
    """Data term of ``tiles`` and its gradient w.r.t. the object and ``enabled``.

    With ``rotate`` the object is rotated on the tape (replicated modes);
    otherwise ``obj`` is an already rotated chunk whose corner is ``origin``.
    """
    if not tiles:
        return 0.0, None, {}
    tape = ad.Tape()
    o = tape.leaf("object", obj)
    leaves = {n: (tape.leaf(n, v) if n in enabled else v) for n, v in params.items()}
    if rotate:
        o_view = model.rotate_object(o, leaves, angle)
        preds = model.predict(o_view, leaves, angle, tiles)
    else:
        preds = model.predict(o, leaves, angle, tiles, origin)
    d = ad.div(model.mismatch(preds, data, angle, tiles), float(n_px))
    if not isinstance(d, ad.Var):
        return float(d), np.zeros_like(obj), {n: np.zeros_like(params[n]) for n in enabled}
    g = ad.gradient(tape, d, ["object"] + list(enabled))
    return float(d.value), g.pop("object"), g


def reg_value_and_grad(reg, obj, representation: str, scale: float = 1.0):
    tape = ad.Tape()
    o = tape.leaf("o", obj)
    v = reg(o, representation)
    if not isinstance(v, ad.Var):
        return float(v) * scale, np.zeros_like(obj)
    g = ad.gradient(tape, v, ["o"])["o"]
    return float(v.value) * scale, g * scale


def data_loss_eager(problem: Problem, obj, params: dict, angle: int, tiles, n_px) -> float:
    model = problem.model
    preds = model.forward(obj, params, angle, tiles)
    return float(model.mismatch(preds, problem.data, angle, tiles)) / n_px


# --- backends ----------------------------------------------------------------------------


class ReplicatedBackend:
    """Full object on every rank (serial and data-parallel modes)."""

    distributed_terms = False

    def __init__(self, comm: Comm, problem: Problem, cfg: RunConfig, obj, opt: Optimizer, buffers: dict):
        self.comm = comm
        self.problem = problem
        self.cfg = cfg
        self.obj = np.array(obj, dtype=float)
        self.opt = opt
        self.buffers = buffers if buffers else opt.init_buffers(self.obj.shape)
        self.grad = None

    def data_gradient(self, angle, tiles, params, enabled, n_px):
        d, g, pg = local_data_gradient(self.problem.model, self.problem.data, self.obj, params, enabled,
                                       angle, tiles, n_px)
        self.grad = g
        return d, pg

    def finish_object_gradient(self):
        local = self.grad if self.grad is not None else np.zeros_like(self.obj)
        self.grad = self.comm.allreduce_sum(local) if self.comm.size > 1 else local

    def abs_max(self, representation):
        return [float(np.abs(m).max()) for m in _channels(self.obj, representation)]

    def refresh_weights(self, reg, representation, global_max):
        reg.state.refresh(self.obj, representation, global_max)

    def regularize(self, regs, representation) -> dict:
        terms = {}
        for reg in regs:
            v, g = reg_value_and_grad(reg, self.obj, representation)
            self.grad = self.grad + g
            terms[reg.kind] = terms.get(reg.kind, 0.0) + v
        return terms

    def grad_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.grad)))

    def update(self, iteration: int, loss_fn=None):
        if isinstance(self.opt, CG):
            self.obj = self.opt.cg_step(self.obj, loss_fn, self.grad)
        else:
            self.obj = self.opt.apply(self.obj, self.grad, self.buffers, iteration)
        if self.cfg.nonnegative:
            np.maximum(self.obj, 0.0, out=self.obj)

    def full_object(self):
        return self.obj.copy()

    def full_buffers(self):
        return {k: v.copy() for k, v in self.buffers.items()}

    def close(self):
        pass


# --- the loop ------------------------------------------------------------------------------


def _initial_state(problem: Problem, cfg: RunConfig):
    """Starting object, optimizer state, counters, and log (fresh or resumed)."""
    state = {"object": problem.initial_object.copy(), "buffers": {}, "extra": {}, "opt_iteration": 0,
             "epoch": 0, "minibatch": 0, "log": [], "support": None}
    if cfg.resume and cfg.checkpoint_dir:
        path = latest_checkpoint(cfg.checkpoint_dir)
        if path is not None:
            ck = load_checkpoint(path)
            problem.registry.load_state_dict(ck.registry_state)
            state.update(object=ck.object, buffers=ck.object_opt_buffers, extra=ck.object_opt_extra, opt_iteration=ck.object_opt_iteration, epoch=ck.epoch,
                         minibatch=ck.minibatch, log=ck.log, support=ck.support, resumed=True)
            log.info("resumed from %s at epoch %d", path, ck.epoch)
    return state


def _make_object_optimizer(cfg: RunConfig, state) -> Optimizer:
    spec = dict(cfg.object_optimizer)
    name = spec.pop("name")
    step = spec.pop("step_size")
    opt = make_optimizer(name, step, **spec)
    opt.state.iteration = state["opt_iteration"]
    if isinstance(opt, CG) and state["extra"]:
        opt.state.extra.update({k: np.asarray(v) for k, v in state["extra"].items()})
        if "alpha" in opt.state.extra:
            opt.state.extra["alpha"] = float(opt.state.extra["alpha"])
    return opt


def _write_checkpoint(cfg, epoch, minibatch, obj, buffers, opt, registry, support, entries):
    if not cfg.checkpoint_dir:
        return
    extra = {}
    if isinstance(opt, CG):
        extra = {k: v for k, v in opt.state.extra.items() if k in ("g_prev", "d_prev", "alpha") and v is not None}
    ck = Checkpoint(obj, epoch, minibatch, opt.state.iteration, buffers, extra, registry.state_dict(), support,
                    entries)
    save_checkpoint(checkpoint_path(cfg.checkpoint_dir, epoch), ck)


def worker(comm: Comm, problem: Problem, cfg: RunConfig, backend_factory, state) -> Reconstruction | None:
    model = problem.model
    registry = problem.registry
    rep = model.config.representation
    opt = _make_object_optimizer(cfg, state)
    backend = backend_factory(comm, problem, cfg, state["object"], opt, copy.deepcopy(state["buffers"]))
    regs = [make_regularizer(r) for r in cfg.regularizers]
    support = None
    if cfg.support is not None:
        mask = state["support"] if state["support"] is not None else np.ones(model.object_shape[:2])
        support = SupportMask(mask, cfg.support.get("threshold", 0.1), cfg.support.get("sigma", 1.0))
    entries = list(state["log"])
    minibatch = state["minibatch"]
    start = state["epoch"]
    if cfg.checkpoint_dir and start == 0 and not state.get("resumed"):
        obj0, bufs0 = backend.full_object(), backend.full_buffers()
        if comm.rank == 0:
            _write_checkpoint(cfg, 0, minibatch, obj0, bufs0, opt, registry,
                              None if support is None else support.mask, entries)
        comm.barrier()
    try:
        for epoch in range(start, cfg.epochs):
            plan = schedule(model.n_angles, model.n_tiles, cfg.batch_size, comm.size, cfg.shuffle_seed, epoch)
            for i, it in enumerate(plan):
                values = comm.bcast(registry.snapshot() if comm.rank == 0 else None)
                params = model_params(problem, values)
                enabled = [n for n in registry.enabled_names(minibatch) if n in params]
                tiles = list(it.tiles[comm.rank])
                n_px = model.n_pixels(problem.data, it.angle, it.all_tiles)
                d_local, pg_local = backend.data_gradient(it.angle, tiles, params, enabled, n_px)
                if not pg_local:
                    pg_local = {n: np.zeros_like(params[n]) for n in enabled}
                red = comm.allreduce_sum({"D": np.asarray(d_local), **pg_local})
                d_total = float(red.pop("D"))
                backend.finish_object_gradient()
                for reg in regs:
                    if isinstance(reg, ReweightedL1) and reg.state.due(minibatch, i == 0):
                        gmax = comm.allreduce_max(np.asarray(backend.abs_max(rep)))
                        backend.refresh_weights(reg, rep, gmax)
                        reg.state.last_refresh = minibatch
                terms = backend.regularize(regs, rep)
                if backend.distributed_terms and comm.size > 1:
                    terms = {k: float(v) for k, v in comm.allreduce_sum(terms).items()}
                finite = np.isfinite(d_total) and all(np.isfinite(v) for v in terms.values())
                finite = finite and bool(comm.allreduce_sum(np.asarray(float(not backend.grad_finite()))) == 0)
                if not finite:
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, iteration {minibatch}; "
                        "the last good checkpoint is kept"
                    )
                loss_fn = None
                if isinstance(opt, CG):
                    def loss_fn(x, _a=it.angle, _t=tiles, _p=params, _n=n_px):
                        total = data_loss_eager(problem, x, _p, _a, _t, _n)
                        return total + sum(float(r(x, rep)) for r in regs)
                backend.update(opt.state.iteration, loss_fn)
                if not isinstance(opt, CG):
                    opt.state.iteration += 1
                if support is not None:
                    backend.obj = apply_support(backend.obj, support, rep)
                rejected = []
                if comm.rank == 0:
                    rejected = registry.update_all({k: v for k, v in red.items()}, minibatch)
                comm.barrier()
                entries.append({"epoch": epoch, "iteration": minibatch, "angle": it.angle, "D": d_total,
                                "R": {k: float(v) for k, v in terms.items()}, "rejected": rejected})
                minibatch += 1
            if support is not None and (epoch + 1) % int(cfg.support.get("every", 1)) == 0:
                support = shrink_wrap(backend.obj, support, rep)
                backend.obj = apply_support(backend.obj, support, rep)
            obj_full = backend.full_object()
            bufs = backend.full_buffers()
            if comm.rank == 0:
                registry.record_traces()
                _write_checkpoint(cfg, epoch + 1, minibatch, obj_full, bufs, opt, registry,
                                  None if support is None else support.mask, entries)
            comm.barrier()
        obj_full = backend.full_object()
        audit = getattr(backend, "audit_report", lambda: None)()
    finally:
        backend.close()
    if comm.rank != 0:
        return None
    return Reconstruction(obj_full, registry, entries, cfg.epochs, None if support is None else support.mask, audit)


def _backend_for(mode: str):
    if mode in ("serial", "dp"):
        return ReplicatedBackend
    if mode == "do":
        from .distributed import SlabBackend

        return SlabBackend
    from .h5mode import FileBackend

    return FileBackend


def reconstruct(problem: Problem, cfg: RunConfig) -> Reconstruction:
    problem.model.check_params(model_params(problem, problem.registry.snapshot()))
    problem.registry.check_mode(cfg.mode)
    if cfg.mode == "h5" and not cfg.store_path:
        raise ValueError("h5 mode needs a store_path for the object file")
    state = _initial_state(problem, cfg)
    group = WorkerGroup(cfg.n_ranks)
    factory = _backend_for(cfg.mode)
    results = group.run(lambda comm: worker(comm, problem, cfg, factory, state))
    return results[0]


def run_serial(problem: Problem, cfg: RunConfig) -> Reconstruction:
    return reconstruct(problem, _with_mode(cfg, "serial"))


def run_dp(problem: Problem, cfg: RunConfig) -> Reconstruction:
    return reconstruct(problem, _with_mode(cfg, "dp"))


def run_do(problem: Problem, cfg: RunConfig) -> Reconstruction:
    return reconstruct(problem, _with_mode(cfg, "do"))


def run_h5(problem: Problem, cfg: RunConfig) -> Reconstruction:
    return reconstruct(problem, _with_mode(cfg, "h5"))


def _with_mode(cfg: RunConfig, mode: str) -> RunConfig:
    import dataclasses

    n = 1 if mode == "serial" else cfg.n_ranks
    return dataclasses.replace(cfg, mode=mode, n_ranks=n)
