"""Per-epoch checkpoints in HDF5.

Layout::

    /object                        full object [Ly, Lx, Lz, C]
    /object_opt/<buffer>           object optimizer buffers (full size)
    /registry/<name>/value         refinable parameter values
    /registry/<name>/opt/...       their optimizer states
    /support                       support mask (optional)
    attrs: epoch, minibatch, object_opt_iteration, log (JSON)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import h5py
import numpy as np


@dataclass
class Checkpoint:
    object: np.ndarray
    epoch: int
    minibatch: int
    object_opt_iteration: int = 0
    object_opt_buffers: dict = field(default_factory=dict)
    object_opt_extra: dict = field(default_factory=dict)
    registry_state: dict = field(default_factory=dict)
    support: np.ndarray | None = None
    log: list = field(default_factory=list)


def checkpoint_path(directory, epoch: int) -> Path:
    return Path(directory) / f"checkpoint_epoch{epoch:04d}.h5"


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with h5py.File(tmp, "w") as f:
        f.create_dataset("object", data=ckpt.object)
        g = f.create_group("object_opt")
        for k, v in ckpt.object_opt_buffers.items():
            g.create_dataset(k, data=v)
        e = f.create_group("object_opt_extra")
        for k, v in ckpt.object_opt_extra.items():
            if v is not None:
                e.create_dataset(k, data=np.asarray(v))
        r = f.create_group("registry")
        for k, v in ckpt.registry_state.items():
            r.create_dataset(k, data=np.asarray(v))
        if ckpt.support is not None:
            f.create_dataset("support", data=ckpt.support)
        f.attrs["epoch"] = ckpt.epoch
        f.attrs["minibatch"] = ckpt.minibatch
        f.attrs["object_opt_iteration"] = ckpt.object_opt_iteration
        f.attrs["log"] = json.dumps(ckpt.log)
    os.replace(tmp, path)
    return path


def _read_group(g) -> dict:
    out = {}

    def visit(name, obj):
        if isinstance(obj, h5py.Dataset):
            out[name] = obj[()]

    g.visititems(visit)
    return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with h5py.File(path, "r") as f:
        return Checkpoint(
            object=f["object"][()],
            epoch=int(f.attrs["epoch"]),
            minibatch=int(f.attrs["minibatch"]),
            object_opt_iteration=int(f.attrs["object_opt_iteration"]),
            object_opt_buffers=_read_group(f["object_opt"]),
            object_opt_extra=_read_group(f["object_opt_extra"]) if "object_opt_extra" in f else {},
            registry_state=_read_group(f["registry"]),
            support=f["support"][()] if "support" in f else None,
            log=json.loads(f.attrs["log"]),
        )


def latest_checkpoint(directory) -> Path | None:
    paths = sorted(Path(directory).glob("checkpoint_epoch*.h5"))
    return paths[-1] if paths else None
