"""Run one tomography problem under every parallel mode and compare the results.

    python scripts/tomography_modes.py --ranks 4 --epochs 3
"""

import argparse
import dataclasses
import tempfile
import time
from pathlib import Path

import numpy as np

from xrecon.config import ReconConfig
from xrecon.experiment import build_problem
from xrecon.runtime import reconstruct
from xrecon.sim import TomoSimSpec, simulate_tomography


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ranks", type=int, default=4)
    p.add_argument("--epochs", type=int, default=3)
    args = p.parse_args()

    ds, _ = simulate_tomography(TomoSimSpec(tiles=(2, 2)))
    n_tiles = ds.data.shape[1]
    if n_tiles % args.ranks:
        p.error(f"--ranks must divide the {n_tiles} tiles per projection")
    results = {}
    with tempfile.TemporaryDirectory() as tmp:
        for mode, ranks in (("serial", 1), ("dp", args.ranks), ("do", args.ranks), ("h5", args.ranks)):
            # batch size is per rank, so every mode takes one update per projection
            rc = ReconConfig(model="tomography", epochs=args.epochs, batch_size=n_tiles // ranks, mode=mode,
                             ranks=ranks, object_optimizer={"name": "adam", "step_size": 1e-6})
            problem, run = build_problem(rc, ds)
            if mode == "h5":
                run = dataclasses.replace(run, store_path=str(Path(tmp) / "object.h5"))
            t0 = time.perf_counter()
            results[mode] = reconstruct(problem, run).object
            print(f"{mode:6s} ranks {ranks}  {time.perf_counter() - t0:6.2f} s")
    ref = results["serial"]
    for mode, obj in results.items():
        print(f"{mode:6s} max relative difference from serial {np.abs(obj - ref).max() / np.abs(ref).max():.2e}")


if __name__ == "__main__":
    main()
