"""Ptychography with probe-position refinement on a synthetic object.

    python scripts/ptycho_demo.py --epochs 200 --plot ptycho.png
"""

import argparse

import numpy as np

from xrecon.config import ReconConfig
from xrecon.experiment import build_problem
from xrecon.metrics import ssim
from xrecon.runtime import reconstruct
from xrecon.sim import PtychoSimSpec, simulate_ptycho


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--position-error", type=float, default=2.0, help="max scan position error in pixels")
    p.add_argument("--photons", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", help="save object and position plots here")
    args = p.parse_args()

    spec = PtychoSimSpec(max_position_error=args.position_error, photons=args.photons, seed=args.seed)
    ds, truth = simulate_ptycho(spec)
    n_pos = ds.data.shape[1]
    batch = 5
    rc = ReconConfig(model="ptychography", epochs=args.epochs, batch_size=batch,
                     object_optimizer={"name": "adam", "step_size": 0.01},
                     params={"probe": {"refine": False},
                             # positions start moving once the object has a rough shape
                             "probe_pos_correction": {"optimizer": "adam", "step_size": 0.01,
                                                      "enable_at": 10 * n_pos // batch}})
    problem, run = build_problem(rc, ds)
    recon = reconstruct(problem, run)

    inner = slice(8, spec.object_n - 8)
    o, t = recon.object[inner, inner, 0], truth["object"][inner, inner, 0]
    err = truth["position_errors"] - truth["position_errors"].mean(axis=0)
    found = recon.registry["probe_pos_correction"]
    print(f"phase SSIM {ssim(o[..., 0], t[..., 0]):.4f}")
    print(f"magnitude SSIM {ssim(np.exp(-o[..., 1]), np.exp(-t[..., 1])):.4f}")
    print(f"position rms {np.sqrt(np.mean(err**2)):.3f} px -> {np.sqrt(np.mean((found - err) ** 2)):.3f} px")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(1, 3, figsize=(13, 4))
        ax[0].imshow(truth["object"][:, :, 0, 0], cmap="gray")
        ax[0].set_title("true phase")
        ax[1].imshow(recon.object[:, :, 0, 0], cmap="gray")
        ax[1].set_title("reconstructed phase")
        ax[2].quiver(*ds.metadata["positions"].T[::-1], *err.T[::-1], color="k", label="true error")
        ax[2].quiver(*ds.metadata["positions"].T[::-1], *found.T[::-1], color="r", alpha=0.6, label="refined")
        ax[2].legend()
        ax[2].set_title("position corrections")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=100)


if __name__ == "__main__":
    main()
