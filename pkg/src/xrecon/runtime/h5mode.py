"""File-mediated mode: the object and its gradient live in one HDF5 file.

Datasets in the store (chunked by y-slice)::

    object      [Ly, Lx, Lz, C]  current object (storage dtype)
    object_rot  [Ly, Lx, Lz, C]  object rotated to the current angle
    grad_rot    [Ly, Lx, Lz, C]  chunk gradients accumulated in the rotated frame
    grad        [Ly, Lx, Lz, C]  gradient in the object frame
    opt/<name>  optimizer buffers

Each rank rotates its own rows into ``object_rot``, reads the chunks its
tiles need straight from the file, and adds chunk gradients into
``grad_rot`` under per-slice locks, one rank at a time in rank order. The
update then streams one y-slice of object, gradient, and optimizer buffers
at a time.
"""

from __future__ import annotations

import threading
from pathlib import Path

import h5py
import numpy as np

from ..transforms import rotate, rotate_with_grad, vacuum_fill
from .comm import Comm
from .distributed import ChunkRequest, SlabBackend, SlabPartition
from .engine import local_data_gradient

DATASETS = ("object", "object_rot", "grad_rot", "grad")


def create_store(path, obj: np.ndarray, buffers: dict, dtype) -> h5py.File:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    f = h5py.File(path, "w")
    chunks = (1,) + obj.shape[1:]
    for name in DATASETS:
        dt = dtype if name.startswith("object") else np.float64
        f.create_dataset(name, shape=obj.shape, dtype=dt, chunks=chunks)
    f["object"][...] = obj.astype(dtype)
    for k, v in buffers.items():
        f.create_dataset(f"opt/{k}", data=np.asarray(v, dtype=float), chunks=chunks)
    return f


class FileBackend(SlabBackend):
    distributed_terms = True

    def __init__(self, comm: Comm, problem, cfg, obj, opt, buffers: dict):
        self.comm = comm
        self.problem = problem
        self.cfg = cfg
        self.model = problem.model
        self.opt = opt
        self.dtype = np.dtype(cfg.storage_dtype)
        shape = self.model.object_shape
        self.partition = SlabPartition(shape[0], comm.size)
        self.y0, self.y1 = self.partition.range(comm.rank)
        self.fill = vacuum_fill(self.model.config.representation, shape[3])
        self.grad = None
        self.buffer_names = tuple(buffers) if buffers else opt.buffer_names
        shared = None
        if comm.rank == 0:
            bufs = buffers if buffers else opt.init_buffers(shape)
            shared = (create_store(cfg.store_path, np.asarray(obj, dtype=float), bufs, self.dtype),
                      [threading.Lock() for _ in range(shape[0])])
        self.file, self.locks = comm.bcast(shared)
        self.buffers = {k: None for k in self.buffer_names}
        self.max_chunk_bytes = 0

    @property
    def slab(self):
        return self.file["object"][self.y0 : self.y1]

    def data_gradient(self, angle, tiles, params, enabled, n_px):
        model, f, comm = self.model, self.file, self.comm
        y0, y1 = self.y0, self.y1
        slab = self.file["object"][y0:y1].astype(float)
        theta = self._theta(params, angle)
        refine_tilt = "tilts" in enabled
        rotated = theta != 0 or refine_tilt
        if y1 > y0:
            rot = rotate(slab, theta, "y", self.fill) if rotated else slab
            f["object_rot"][y0:y1] = rot.astype(self.dtype)
            f["grad_rot"][y0:y1] = 0.0
        comm.barrier()
        request = chunk = None
        if tiles:
            cy0, cy1, cx0, cx1 = model.chunk_window(angle, tiles)
            request = ChunkRequest(comm.rank, cy0, cy1, cx0, cx1)
            request.check(*model.object_shape[:2])
            chunk = f["object_rot"][cy0:cy1, cx0:cx1].astype(float)
        tape_enabled = [n for n in enabled if n != "tilts"]
        origin = None if request is None else (request.y0, request.x0)
        d, chunk_grad, pg = local_data_gradient(model, self.problem.data, chunk, params, tape_enabled, angle,
                                                tiles, n_px, origin=origin, rotate=False)
        # accumulate in rank order so sums are reproducible
        for r in range(comm.size):
            comm.barrier()
            if r == comm.rank and chunk_grad is not None:
                for i, y in enumerate(range(request.y0, request.y1)):
                    with self.locks[y]:
                        cur = f["grad_rot"][y, request.x0 : request.x1]
                        f["grad_rot"][y, request.x0 : request.x1] = cur + chunk_grad[i]
        comm.barrier()
        rot_grad = f["grad_rot"][y0:y1]
        g_theta = 0.0
        if rotated and y1 > y0:
            grad, g_theta = rotate_with_grad(slab, theta, rot_grad, "y", self.fill)
        else:
            grad = rot_grad
        if not pg:
            pg = {n: np.zeros_like(params[n]) for n in tape_enabled}
        if refine_tilt:
            gt = np.zeros_like(params["tilts"])
            gt[0, angle] = g_theta
            pg["tilts"] = gt
        self.grad = grad
        return d, pg

    def update(self, iteration: int, loss_fn=None):
        f = self.file
        if self.y1 > self.y0:
            f["grad"][self.y0 : self.y1] = self.grad
        for y in range(self.y0, self.y1):
            x = f["object"][y].astype(float)
            g = f["grad"][y]
            bufs = {k: f[f"opt/{k}"][y] for k in self.buffer_names}
            new = self.opt.apply(x, g, bufs, iteration)
            if self.cfg.nonnegative:
                np.maximum(new, 0.0, out=new)
            f["object"][y] = new.astype(self.dtype)
            for k, v in bufs.items():
                f[f"opt/{k}"][y] = v
        self.grad = None
        self.comm.barrier()

    def full_object(self):
        self.comm.barrier()
        out = self.file["object"][()].astype(float)
        self.comm.barrier()
        return out

    def full_buffers(self):
        self.comm.barrier()
        out = {k: self.file[f"opt/{k}"][()] for k in self.buffer_names}
        self.comm.barrier()
        return out

    def audit_report(self):
        return None

    def close(self):
        try:
            self.comm.barrier()
        except threading.BrokenBarrierError:
            pass
        if self.comm.rank == 0:
            self.file.close()
