"""Execution modes for reconstructions: serial, data-parallel (dp),
distributed-object (do), and file-mediated (h5)."""

from .checkpoint import Checkpoint, latest_checkpoint, load_checkpoint, save_checkpoint
from .comm import CollectiveError, Comm, WorkerGroup
from .distributed import ChunkRequest, MemoryAudit, SlabError, SlabPartition, gather_chunk, scatter_gradient
from .engine import (
    DivergenceError,
    Problem,
    Reconstruction,
    RunConfig,
    reconstruct,
    run_do,
    run_dp,
    run_h5,
    run_serial,
)
from .schedule import Iteration, schedule

__all__ = [
    "Checkpoint", "ChunkRequest", "CollectiveError", "Comm", "DivergenceError", "Iteration", "MemoryAudit",
    "Problem", "Reconstruction", "RunConfig", "SlabError", "SlabPartition", "WorkerGroup", "gather_chunk",
    "latest_checkpoint", "load_checkpoint", "reconstruct", "run_do", "run_dp", "run_h5", "run_serial",
    "save_checkpoint", "scatter_gradient", "schedule",
]
