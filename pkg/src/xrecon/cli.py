"""Command-line entry point: ``xrecon simulate | reconstruct | report``.

Scratch files (the h5-mode object store, default checkpoints) go under
``$XRECON_SCRATCH`` when it is set, else under the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import h5py
import numpy as np

from .config import ConfigError, ReconConfig, load_config
from .io import DatasetError, read_dataset, write_dataset

log = logging.getLogger("xrecon")


def _scratch(out_dir: Path) -> Path:
    root = os.environ.get("XRECON_SCRATCH")
    path = Path(root) if root else out_dir / "scratch"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _truth_path(data_path: Path) -> Path:
    return data_path.with_name(data_path.stem + "_truth.npz")


def cmd_simulate(args) -> int:
    from .experiment import simulate

    cfg = load_config(args.config)
    if cfg.simulate is None:
        raise ConfigError("the config has no 'simulate' section", source=cfg.source)
    ds, truth = simulate(cfg.simulate, args.seed)
    out = Path(args.output)
    path = write_dataset(out, ds)
    np.savez(_truth_path(out), **{k: np.asarray(v) for k, v in truth.items()})
    print(f"wrote {path} with data shape {ds.data.shape}")
    return 0


def _apply_overrides(rc: ReconConfig, args) -> ReconConfig:
    changes = {}
    if args.ranks is not None:
        changes["ranks"] = args.ranks
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.seed is not None:
        changes["shuffle_seed"] = args.seed
    rc = dataclasses.replace(rc, **changes)
    if rc.mode == "serial" and rc.ranks != 1:
        raise ConfigError(f"serial mode runs on one rank, got --ranks {rc.ranks}; pick --mode dp, do, or h5")
    return rc


def save_reconstruction(path: Path, recon) -> None:
    with h5py.File(path, "w") as f:
        f.create_dataset("object", data=recon.object)
        for name in recon.registry.names():
            f.create_dataset(f"params/{name}", data=recon.registry[name])
        f.attrs["epochs"] = recon.epochs_done
        f.attrs["log"] = json.dumps(recon.log)


def load_reconstruction(path: Path) -> dict:
    with h5py.File(path, "r") as f:
        out = {"object": f["object"][()], "params": {k: v[()] for k, v in f["params"].items()}}
        out["log"] = json.loads(f.attrs["log"])
    return out


def _plot(out_dir: Path, recon) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    obj = recon.object
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    mid = obj.shape[2] // 2
    for ax, ch, title in ((axes[0], 0, "channel 0"), (axes[1], 1, "channel 1")):
        im = ax.imshow(obj[:, :, mid, min(ch, obj.shape[3] - 1)], cmap="gray")
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
    losses = [e["D"] for e in recon.log]
    axes[2].semilogy(np.maximum(losses, 1e-300))
    axes[2].set_xlabel("iteration")
    axes[2].set_ylabel("data loss")
    fig.tight_layout()
    fig.savefig(out_dir / "reconstruction.png", dpi=100)
    plt.close(fig)


def cmd_reconstruct(args) -> int:
    from .experiment import build_problem
    from .runtime import reconstruct

    cfg = load_config(args.config)
    rc = _apply_overrides(cfg.reconstruct, args)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    scratch = _scratch(out_dir)
    if rc.checkpoint_dir is None:
        rc = dataclasses.replace(rc, checkpoint_dir=str(scratch / "checkpoints"))
    ds = read_dataset(args.data)
    problem, run = build_problem(rc, ds)
    if run.mode == "h5":
        run = dataclasses.replace(run, store_path=str(scratch / "object_store.h5"))
    recon = reconstruct(problem, run)
    save_reconstruction(out_dir / "reconstruction.h5", recon)
    if not args.no_plots:
        _plot(out_dir, recon)
    last = recon.log[-1]["D"] if recon.log else float("nan")
    print(f"mode {run.mode} on {run.n_ranks} rank(s): {len(recon.log)} iterations, final data loss {last:.6g}")
    return 0


def cmd_report(args) -> int:
    from .metrics import affine_error, highpass, phase_ssim, spectrum_resolution, ResolutionError

    rec = load_reconstruction(Path(args.recon))
    obj = rec["object"]
    report = {"iterations": len(rec["log"]),
              "final_loss": rec["log"][-1]["D"] if rec["log"] else None,
              "params": {k: v.tolist() for k, v in rec["params"].items() if v.size <= 64}}
    phase = obj[:, :, obj.shape[2] // 2, 0]
    try:
        report["resolution_cycles_per_px"] = spectrum_resolution(phase)
    except ResolutionError as e:
        report["resolution_cycles_per_px"] = None
        report["resolution_note"] = str(e)
    if args.truth:
        truth = dict(np.load(args.truth))
        if "phase_highpass" in truth and args.config:
            from .config import sim_spec_class

            cfg = load_config(args.config)
            sim = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.simulate.items() if k != "kind"}
            spec = sim_spec_class(cfg.simulate["kind"])(**sim)
            hp = highpass(phase, spec.highpass_cutoff, spec.pixel_size)
            report["phase_ssim"] = phase_ssim(hp, truth["phase_highpass"])
        elif "object" in truth and truth["object"].shape == obj.shape:
            report["phase_ssim"] = phase_ssim(phase, truth["object"][:, :, obj.shape[2] // 2, 0])
        if "distances" in truth and "distances" in rec["params"]:
            report["distance_error_cm"] = (100 * np.abs(rec["params"]["distances"] - truth["distances"])).tolist()
        if "affine_params" in truth and "affine_params" in rec["params"]:
            report["affine_error"] = [affine_error(a, b, phase.shape)
                                      for a, b in zip(rec["params"]["affine_params"], truth["affine_params"])]
    text = json.dumps(report, indent=1)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xrecon", description="Differentiable x-ray image reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--output", required=True, help="dataset path (.h5, or .json for the raw layout)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="reconstruct a dataset")
    r.add_argument("--config", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--output", required=True, help="output directory")
    r.add_argument("--ranks", type=int)
    r.add_argument("--mode", choices=("serial", "dp", "do", "h5"))
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int, help="tile shuffle seed")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_reconstruct)

    q = sub.add_parser("report", help="metrics for a reconstruction")
    q.add_argument("--recon", required=True, help="reconstruction.h5 written by 'reconstruct'")
    q.add_argument("--truth", help="ground-truth .npz written by 'simulate'")
    q.add_argument("--config", help="config used for simulation (for the phase reference filter)")
    q.add_argument("--output", help="write the JSON report here as well")
    q.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
