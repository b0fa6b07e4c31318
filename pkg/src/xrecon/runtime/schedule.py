"""Deterministic assignment of tiles to (iteration, rank)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Iteration:
    angle: int
    tiles: tuple  # tiles[rank] is a tuple of tile indices

    @property
    def all_tiles(self) -> list[int]:
        return [t for per_rank in self.tiles for t in per_rank]


def schedule(n_angles: int, n_tiles: int, batch_size: int, n_ranks: int,
             shuffle_seed: int | None = None, epoch: int = 0) -> list[Iteration]:
    """One epoch: angles in order, each angle's tiles split into iterations.

    An iteration covers ``n_ranks * batch_size`` consecutive tiles; rank r
    takes the r-th group of ``batch_size``. With ``shuffle_seed`` the tile
    order within each angle is permuted by a generator seeded from
    (seed, epoch, angle), so resumed runs see the same order.
    """
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    if n_ranks < 1:
        raise ValueError("need at least one rank")
    plan = []
    per_iter = batch_size * n_ranks
    for a in range(n_angles):
        order = np.arange(n_tiles)
        if shuffle_seed is not None:
            order = np.random.default_rng([shuffle_seed, epoch, a]).permutation(n_tiles)
        for start in range(0, n_tiles, per_iter):
            block = order[start : start + per_iter]
            tiles = tuple(tuple(int(t) for t in block[r * batch_size : (r + 1) * batch_size]) for r in range(n_ranks))
            plan.append(Iteration(a, tiles))
    return plan
