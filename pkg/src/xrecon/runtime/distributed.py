"""Distributed-object mode: the object is split into y-slabs, one per rank.

Rotation about the y axis never mixes rows, so each rank rotates its own
slab. A rank that needs a chunk of the rotated object assembles it from the
slabs of its peers with one alltoall, and returns the chunk gradient to the
owners with another. Gradients w.r.t. the unrotated slab are obtained with
the exact adjoint of the rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..regularizers import L1, ReweightedL1, _channels
from ..transforms import rotate, rotate_with_grad, vacuum_fill
from .comm import Comm
from .engine import local_data_gradient, reg_value_and_grad


class SlabError(ValueError):
    pass


@dataclass(frozen=True)
class SlabPartition:
    ly: int
    n_ranks: int

    def __post_init__(self):
        if self.ly < 1 or self.n_ranks < 1:
            raise ValueError("partition needs a positive extent and rank count")

    def range(self, rank: int) -> tuple[int, int]:
        """Rows [y0, y1) of ``rank``; ranks beyond the extent get empty slabs."""
        base, extra = divmod(self.ly, self.n_ranks)
        y0 = rank * base + min(rank, extra)
        return y0, y0 + base + (1 if rank < extra else 0)

    def ranges(self) -> list[tuple[int, int]]:
        return [self.range(r) for r in range(self.n_ranks)]


@dataclass(frozen=True)
class ChunkRequest:
    rank: int
    y0: int
    y1: int
    x0: int
    x1: int

    def check(self, ly: int, lx: int) -> None:
        if not (0 <= self.y0 < self.y1 <= ly):
            raise SlabError(f"chunk rows {self.y0}:{self.y1} outside the object extent 0:{ly}")
        if not (0 <= self.x0 < self.x1 <= lx):
            raise SlabError(f"chunk columns {self.x0}:{self.x1} outside the object extent 0:{lx}")


def _overlap(a0, a1, b0, b1):
    lo, hi = max(a0, b0), min(a1, b1)
    return (lo, hi) if hi > lo else None


def gather_chunk(partition: SlabPartition, comm: Comm, slab: np.ndarray, request: ChunkRequest | None):
    """Collective: every rank serves its rows of every request and receives its own chunk."""
    if request is not None:
        request.check(partition.ly, slab.shape[1])
    requests = comm.allgather(request)
    my0, my1 = partition.range(comm.rank)
    send = []
    for req in requests:
        ov = None if req is None else _overlap(req.y0, req.y1, my0, my1)
        send.append(None if ov is None else np.array(slab[ov[0] - my0 : ov[1] - my0, req.x0 : req.x1]))
    recv = comm.alltoall(send)
    if request is None:
        return None
    chunk = np.concatenate([r for r in recv if r is not None], axis=0)
    if chunk.shape[0] != request.y1 - request.y0:
        raise SlabError("gathered rows do not cover the requested range")
    return chunk


def scatter_gradient(partition: SlabPartition, comm: Comm, chunk_grad, request: ChunkRequest | None,
                     grad_slab: np.ndarray) -> None:
    """Collective: add each chunk gradient into the owners' gradient slabs.

    Contributions are added in ascending source-rank order.
    """
    if request is not None:
        expected = (request.y1 - request.y0, request.x1 - request.x0)
        if chunk_grad is None or tuple(chunk_grad.shape[:2]) != expected:
            got = None if chunk_grad is None else chunk_grad.shape
            raise SlabError(f"chunk gradient shape {got} does not match the requested chunk {expected}")
    requests = comm.allgather(request)
    send = [None] * comm.size
    if request is not None:
        for owner, (o0, o1) in enumerate(partition.ranges()):
            ov = _overlap(request.y0, request.y1, o0, o1)
            if ov is not None:
                send[owner] = np.array(chunk_grad[ov[0] - request.y0 : ov[1] - request.y0])
    recv = comm.alltoall(send)
    my0, _ = partition.range(comm.rank)
    for src, part in enumerate(recv):
        if part is None:
            continue
        req = requests[src]
        lo = max(req.y0, my0) - my0
        grad_slab[lo : lo + part.shape[0], req.x0 : req.x1] += part


class MemoryAudit:
    """Tracks the arrays a rank holds between collectives and their peak total."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.current: dict[str, int] = {}
        self.peak = 0

    def hold(self, name: str, arr) -> None:
        if not self.enabled:
            return
        self.current[name] = 0 if arr is None else int(np.asarray(arr).nbytes)
        self.peak = max(self.peak, sum(self.current.values()))

    def release(self, name: str) -> None:
        self.current.pop(name, None)


class SlabBackend:
    distributed_terms = True

    def __init__(self, comm: Comm, problem, cfg, obj, opt, buffers: dict):
        self.comm = comm
        self.problem = problem
        self.cfg = cfg
        self.model = problem.model
        self.opt = opt
        self.dtype = np.dtype(cfg.storage_dtype)
        self.partition = SlabPartition(self.model.object_shape[0], comm.size)
        self.y0, self.y1 = self.partition.range(comm.rank)
        self.slab = np.array(obj[self.y0 : self.y1], dtype=self.dtype)
        if buffers:
            self.buffers = {k: np.array(v[self.y0 : self.y1], dtype=float) for k, v in buffers.items()}
        else:
            self.buffers = opt.init_buffers(self.slab.shape)
        self.fill = vacuum_fill(self.model.config.representation, self.model.object_shape[3])
        self.grad = None
        self.audit = MemoryAudit(cfg.memory_audit)
        self.max_chunk_bytes = 0
        self.audit.hold("slab", self.slab)
        for k, v in self.buffers.items():
            self.audit.hold(f"buf/{k}", v)

    def _theta(self, params, angle):
        return float(self.model.rotation_angle(params, angle))

    def data_gradient(self, angle, tiles, params, enabled, n_px):
        model = self.model
        slab = self.slab.astype(float)
        theta = self._theta(params, angle)
        refine_tilt = "tilts" in enabled
        rotated = theta != 0 or refine_tilt
        rot = rotate(slab, theta, "y", self.fill) if rotated and slab.shape[0] else slab
        self.audit.hold("rotated", rot)
        request = None
        if tiles:
            y0, y1, x0, x1 = model.chunk_window(angle, tiles)
            request = ChunkRequest(self.comm.rank, y0, y1, x0, x1)
        chunk = gather_chunk(self.partition, self.comm, rot, request)
        self.audit.hold("chunk", chunk)
        tape_enabled = [n for n in enabled if n != "tilts"]
        origin = None if request is None else (request.y0, request.x0)
        d, chunk_grad, pg = local_data_gradient(model, self.problem.data, chunk, params, tape_enabled, angle,
                                                tiles, n_px, origin=origin, rotate=False)
        self.audit.hold("chunk_grad", chunk_grad)
        if chunk is not None:
            self.max_chunk_bytes = max(self.max_chunk_bytes, chunk.astype(float).nbytes)
        rot_grad = np.zeros(slab.shape)
        self.audit.hold("rotated_grad", rot_grad)
        scatter_gradient(self.partition, self.comm, chunk_grad, request, rot_grad)
        self.audit.release("chunk")
        self.audit.release("chunk_grad")
        g_theta = 0.0
        if rotated and slab.shape[0]:
            grad, g_theta = rotate_with_grad(slab, theta, rot_grad, "y", self.fill)
        else:
            grad = rot_grad
        self.audit.hold("grad", grad)
        self.audit.release("rotated")
        self.audit.release("rotated_grad")
        if not pg:
            pg = {n: np.zeros_like(params[n]) for n in tape_enabled}
        if refine_tilt:
            gt = np.zeros_like(params["tilts"])
            gt[0, angle] = g_theta
            pg["tilts"] = gt
        self.grad = grad
        return d, pg

    def finish_object_gradient(self):
        pass

    def _n_voxels(self):
        s = self.model.object_shape
        return s[0] * s[1] * s[2]

    def abs_max(self, representation):
        if self.slab.shape[0] == 0:
            return [0.0, 0.0]
        return [float(np.abs(m).max()) for m in _channels(self.slab.astype(float), representation)]

    def refresh_weights(self, reg, representation, global_max):
        if self.slab.shape[0]:
            reg.state.refresh(self.slab.astype(float), representation, global_max)

    def regularize(self, regs, representation) -> dict:
        terms = {}
        for reg in regs:
            if not isinstance(reg, (L1, ReweightedL1)) or representation != "delta_beta":
                raise ValueError("only l1-type regularizers on delta/beta objects are supported on slabs")
            v = 0.0
            if self.slab.shape[0]:
                slab = self.slab.astype(float)
                scale = slab.shape[0] * slab.shape[1] * slab.shape[2] / self._n_voxels()
                v, g = reg_value_and_grad(reg, slab, representation, scale)
                self.grad = self.grad + g
            terms[reg.kind] = terms.get(reg.kind, 0.0) + v
        return terms

    def grad_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.grad)))

    def update(self, iteration: int, loss_fn=None):
        new = self.opt.apply(self.slab.astype(float), self.grad, self.buffers, iteration)
        if self.cfg.nonnegative:
            np.maximum(new, 0.0, out=new)
        self.slab = new.astype(self.dtype)
        self.audit.release("grad")

    def full_object(self):
        return np.concatenate(self.comm.allgather(self.slab.astype(float)), axis=0)

    def full_buffers(self):
        return {k: np.concatenate(self.comm.allgather(v), axis=0) for k, v in self.buffers.items()}

    def audit_report(self):
        slab_bytes = self.slab.astype(float).nbytes
        bound = slab_bytes * (4 + len(self.buffers)) + 2 * self.max_chunk_bytes
        full = int(np.prod(self.model.object_shape)) * 8
        # a replicated rank holds the same arrays at full-object size
        mine = {"peak": self.audit.peak, "bound": bound, "full_object": full,
                "replicated": full * (4 + len(self.buffers))}
        return self.comm.gather(mine)

    def close(self):
        pass
