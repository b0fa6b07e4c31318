"""In-process worker group with MPI-style collectives.

Each rank runs in its own thread. Every collective is a rendezvous: ranks
deposit their contribution, wait on a shared barrier, read what they need,
and wait again before the slots are reused. Reductions always add in
ascending rank order, so a fixed rank count gives bit-identical results.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from typing import Any, Callable

import numpy as np


class CollectiveError(RuntimeError):
    pass


class WorkerGroup:
    def __init__(self, n_ranks: int, timeout: float | None = 600.0):
        if n_ranks < 1:
            raise ValueError("a worker group needs at least one rank")
        self.n_ranks = int(n_ranks)
        self._barrier = threading.Barrier(self.n_ranks, timeout=timeout)
        self._slots: list[Any] = [None] * self.n_ranks
        self.bytes_sent = defaultdict(int)  # rank -> bytes sent to other ranks

    def run(self, fn: Callable[["Comm"], Any]) -> list:
        """Run ``fn(comm)`` on every rank; returns the per-rank results."""
        if self.n_ranks == 1:
            return [fn(Comm(self, 0))]
        results: list[Any] = [None] * self.n_ranks
        errors: list[BaseException | None] = [None] * self.n_ranks

        def target(rank):
            try:
                results[rank] = fn(Comm(self, rank))
            except BaseException as exc:  # propagate to the caller after join
                errors[rank] = exc
                self._barrier.abort()

        threads = [threading.Thread(target=target, args=(r,), name=f"rank{r}") for r in range(self.n_ranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        real = [e for e in errors if e is not None and not isinstance(e, threading.BrokenBarrierError)]
        if real:
            raise real[0]
        if any(e is not None for e in errors):
            raise CollectiveError("a collective was aborted") from next(e for e in errors if e is not None)
        return results


class Comm:
    """One rank's view of the group."""

    def __init__(self, group: WorkerGroup, rank: int):
        self.group = group
        self.rank = rank
        self.size = group.n_ranks

    def barrier(self) -> None:
        if self.size > 1:
            self.group._barrier.wait()

    def allgather(self, value) -> list:
        if self.size == 1:
            return [value]
        g = self.group
        g._slots[self.rank] = value
        g._barrier.wait()
        out = list(g._slots)
        g._barrier.wait()
        return out

    def alltoall(self, send: list) -> list:
        """``send[j]`` goes to rank j; returns what every rank sent to this one."""
        if len(send) != self.size:
            raise CollectiveError(f"alltoall needs {self.size} entries, got {len(send)}")
        for j, item in enumerate(send):
            if j != self.rank and item is not None:
                self.group.bytes_sent[self.rank] += int(getattr(item, "nbytes", 0))
        table = self.allgather(send)
        return [table[src][self.rank] for src in range(self.size)]

    def bcast(self, value, root: int = 0):
        return self.allgather(value if self.rank == root else None)[root]

    def allreduce_sum(self, value):
        """Sum of arrays, scalars, or dicts of arrays, added in rank order."""
        parts = self.allgather(value)
        return _tree_sum(parts)

    def allreduce_max(self, value):
        parts = self.allgather(value)
        out = parts[0]
        for p in parts[1:]:
            out = np.maximum(out, p)
        return out

    def gather(self, value, root: int = 0):
        parts = self.allgather(value)
        return parts if self.rank == root else None


def _tree_sum(parts):
    first = parts[0]
    if isinstance(first, dict):
        keys = list(first)
        return {k: _tree_sum([p[k] for p in parts]) for k in keys}
    out = np.array(first, dtype=float, copy=True)
    for p in parts[1:]:
        out = out + p
    return out
