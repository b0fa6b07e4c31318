import numpy as np
import pytest
from hypothesis import given, strategies as st

from xrecon.io import Dataset, DatasetError, read_dataset, stack_tiles, tile_image, untile, write_dataset


def _ds(rng):
    return Dataset(rng.random((2, 3, 5, 4)), {"energy_ev": 17.5e3, "distances": np.array([0.4, 0.6, 0.8]),
                                               "label": "scan"})


@pytest.mark.parametrize("name,fmt", [("d.h5", None), ("d.json", None), ("d.h5", "raw")])
def test_roundtrip(tmp_path, rng, name, fmt):
    ds = _ds(rng)
    path = write_dataset(tmp_path / name, ds, fmt)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.data, ds.data)
    np.testing.assert_allclose(back.metadata["distances"], ds.metadata["distances"])
    assert float(back.metadata["energy_ev"]) == 17.5e3
    assert back.metadata["label"] == "scan"


def test_raw_layout_is_little_endian_c_order(tmp_path, rng):
    ds = _ds(rng)
    write_dataset(tmp_path / "d.json", ds)
    raw = np.fromfile(tmp_path / "d.bin", dtype="<f8")
    np.testing.assert_array_equal(raw, ds.data.ravel(order="C"))


def test_rejects_bad_data(tmp_path):
    with pytest.raises(DatasetError, match="4-D"):
        Dataset(np.zeros((2, 3)))
    with pytest.raises(DatasetError, match="non-negative"):
        Dataset(-np.ones((1, 1, 2, 2)))
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "missing.h5")
    with pytest.raises(DatasetError, match="sidecar"):
        read_dataset(tmp_path / "missing.bin")


@given(ly=st.integers(1, 30), lx=st.integers(1, 30), ny=st.integers(1, 5), nx=st.integers(1, 5))
def test_tiling_covers_image_once(ly, lx, ny, nx):
    img = np.arange(ly * lx, dtype=float).reshape(ly, lx)
    try:
        tiles, tiling = tile_image(img, ny, nx)
    except ValueError:
        assert ny > ly or nx > lx or (ny - 1) * -(-ly // ny) >= ly or (nx - 1) * -(-lx // nx) >= lx
        return
    cover = np.zeros((ly, lx), int)
    for y0, y1, x0, x1 in tiling.windows:
        cover[y0:y1, x0:x1] += 1
    assert np.all(cover == 1)
    np.testing.assert_array_equal(untile(tiles, tiling, img.shape), img)
    assert stack_tiles(tiles, tiling).shape == (ny * nx,) + tiling.tile_shape


def test_tiling_errors():
    with pytest.raises(ValueError, match="cannot split"):
        tile_image(np.zeros((3, 3)), 4, 1)
    with pytest.raises(ValueError, match="empty"):
        tile_image(np.zeros((5, 5)), 4, 1)  # tiles of 2 rows: the fourth would start at row 6


def test_tile_counts():
    from xrecon.io import tile_counts

    assert tile_counts((800, 1653), (32, 32)) == (25, 52)
    assert tile_counts((64, 64), (32, 32)) == (2, 2)
