"""Dataset files and tiling.

A dataset is a 4-D intensity array [num_angles, num_tiles, ly, lx] plus a
flat metadata dictionary (energy, pixel size, probe positions, distances,
angles, tile windows). It is stored as HDF5::

    /exchange/data       [num_angles, num_tiles, ly, lx]
    /metadata/<key>      one dataset per metadata entry

or, where HDF5 is unavailable, as a raw little-endian C-order array file
``<name>.bin`` next to a JSON sidecar ``<name>.json`` holding the shape,
dtype, and metadata. Both layouts use the same array ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    data: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise DatasetError(f"dataset must be 4-D [angles, tiles, y, x], got shape {self.data.shape}")
        if np.any(self.data < 0):
            raise DatasetError("intensities must be non-negative")


def _h5():
    try:
        import h5py
    except ImportError:  # pragma: no cover - h5py is a declared dependency
        return None
    return h5py


def write_dataset(path, ds: Dataset, fmt: str | None = None) -> Path:
    """Write ``ds``; ``fmt`` is "h5" or "raw" (default: by suffix, h5 if available)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt is None:
        fmt = "raw" if path.suffix in (".bin", ".json") or _h5() is None else "h5"
    if fmt == "h5":
        h5py = _h5()
        with h5py.File(path, "w") as f:
            f.create_dataset("exchange/data", data=ds.data)
            for k, v in ds.metadata.items():
                f.create_dataset(f"metadata/{k}", data=v if isinstance(v, str) else np.asarray(v))
        return path
    if fmt != "raw":
        raise DatasetError(f"unknown dataset format {fmt!r}")
    stem = path.with_suffix("")
    arr = np.ascontiguousarray(ds.data)
    arr.astype(arr.dtype.newbyteorder("<")).tofile(stem.with_suffix(".bin"))
    side = {
        "shape": list(arr.shape),
        "dtype": arr.dtype.newbyteorder("<").str,
        "order": "C",
        "metadata": {k: _encode(v) for k, v in ds.metadata.items()},
    }
    stem.with_suffix(".json").write_text(json.dumps(side, indent=1))
    return stem.with_suffix(".json")


def read_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        stem = path.with_suffix("")
        side_path = stem.with_suffix(".json")
        if not side_path.exists():
            raise DatasetError(f"missing metadata sidecar {side_path}")
        side = json.loads(side_path.read_text())
        data = np.fromfile(stem.with_suffix(".bin"), dtype=np.dtype(side["dtype"])).reshape(side["shape"])
        return Dataset(data, {k: _decode(v) for k, v in side["metadata"].items()})
    h5py = _h5()
    if not path.exists():
        raise DatasetError(f"no dataset at {path}")
    with h5py.File(path, "r") as f:
        if "exchange/data" not in f:
            raise DatasetError(f"{path} has no exchange/data array")
        data = f["exchange/data"][()]
        meta = {}
        if "metadata" in f:
            for k, v in f["metadata"].items():
                val = v[()]
                meta[k] = val.decode() if isinstance(val, bytes) else val
    return Dataset(data, meta)


def _encode(v):
    if isinstance(v, str):
        return v
    a = np.asarray(v)
    return {"array": a.tolist(), "dtype": a.dtype.str, "shape": list(a.shape)}


def _decode(v):
    if isinstance(v, str):
        return v
    return np.asarray(v["array"], dtype=np.dtype(v["dtype"])).reshape(v["shape"])


# --- tiling ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Tiling:
    tile_shape: tuple  # nominal (ceil) tile size
    windows: list  # (y0, y1, x0, x1) per tile, row-major


def tile_counts(shape, tile_shape) -> tuple[int, int]:
    """Tiles per axis needed to cover ``shape`` with tiles of ``tile_shape`` (last ones may be partial)."""
    return tuple(math.ceil(int(n) / int(t)) for n, t in zip(shape[:2], tile_shape[:2]))


def tile_image(image: np.ndarray, n_tiles_y: int, n_tiles_x: int):
    """Split ``image`` into an n_y x n_x grid of tiles of size ceil(L / N).

    Tiles in the last row or column may be smaller. Returns the list of tile
    arrays and the :class:`Tiling` recording each tile's window.
    """
    ly, lx = image.shape[:2]
    if n_tiles_y < 1 or n_tiles_x < 1:
        raise ValueError("tile counts must be at least 1")
    if n_tiles_y > ly or n_tiles_x > lx:
        raise ValueError(f"cannot split a {ly}x{lx} image into {n_tiles_y}x{n_tiles_x} tiles")
    ty, tx = math.ceil(ly / n_tiles_y), math.ceil(lx / n_tiles_x)
    if (n_tiles_y - 1) * ty >= ly or (n_tiles_x - 1) * tx >= lx:
        raise ValueError(f"{n_tiles_y}x{n_tiles_x} tiles of {ty}x{tx} leave empty tiles on a {ly}x{lx} image")
    windows = []
    for i in range(n_tiles_y):
        for j in range(n_tiles_x):
            windows.append((i * ty, min((i + 1) * ty, ly), j * tx, min((j + 1) * tx, lx)))
    tiles = [image[y0:y1, x0:x1] for y0, y1, x0, x1 in windows]
    return tiles, Tiling((ty, tx), windows)


def untile(tiles, tiling: Tiling, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.asarray(tiles[0]).dtype)
    for t, (y0, y1, x0, x1) in zip(tiles, tiling.windows):
        out[y0:y1, x0:x1] = np.asarray(t)[: y1 - y0, : x1 - x0]
    return out


def stack_tiles(tiles, tiling: Tiling) -> np.ndarray:
    """[num_tiles, ty, tx] array with smaller edge tiles zero-padded."""
    ty, tx = tiling.tile_shape
    out = np.zeros((len(tiles), ty, tx))
    for i, t in enumerate(tiles):
        out[i, : t.shape[0], : t.shape[1]] = t
    return out
