"""Registry of refinable experimental parameters.

Each entry owns a value, the optimizer that updates it, the minibatch index
from which it is refined, and an optional elementwise mask (0 freezes an
element, e.g. the affine row of the reference hologram).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .optimizers import CG, Optimizer, make_optimizer

log = logging.getLogger(__name__)

KNOWN = {
    "probe": None,  # [n_modes, ly, lx, 2]
    "probe_pos_correction": 2,  # [n_pos, 2]
    "distances": 1,
    "defocus": 1,
    "tilts": 2,  # [3, num_angles], rows: rotation about y, x, z
    "affine_params": 2,  # [n_dist, 7]
    "kappa_log": 1,
    "slice_positions": 1,
    "cross_angle_offsets": 2,  # [num_angles, 2]
}

NEVER = np.iinfo(np.int64).max


class ParamError(ValueError):
    pass


@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    optimizer: Optimizer | None = None
    enable_at: int = 0
    mask: np.ndarray | None = None
    trace: list = field(default_factory=list)

    @property
    def refinable(self) -> bool:
        return self.optimizer is not None and self.enable_at < NEVER

    def enabled(self, minibatch: int) -> bool:
        return self.refinable and minibatch >= self.enable_at


class ParamRegistry:
    def __init__(self):
        self.entries: dict[str, ParamEntry] = {}

    def register(self, name: str, value, optimizer: Optimizer | None = None, enable_at: int = 0,
                 mask=None) -> ParamEntry:
        if name in self.entries:
            raise ParamError(f"parameter {name!r} is already registered")
        if name not in KNOWN:
            raise ParamError(f"unknown parameter {name!r}; expected one of {sorted(KNOWN)}")
        value = np.array(value, dtype=float)
        ndim = KNOWN[name]
        if ndim is not None and value.ndim != ndim:
            raise ParamError(f"{name} must be {ndim}-D, got shape {value.shape}")
        if name == "tilts" and value.shape[0] != 3:
            raise ParamError(f"tilts must have 3 rows (y, x, z), got shape {value.shape}")
        if name == "affine_params" and value.shape[-1] != 7:
            raise ParamError(f"affine_params must be [n_dist, 7], got shape {value.shape}")
        if isinstance(optimizer, CG):
            raise ParamError("conjugate gradient is only available for the object")
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=float), value.shape).copy()
        entry = ParamEntry(name, value, optimizer, int(enable_at), mask)
        self.entries[name] = entry
        return entry

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self.entries[name].value
        except KeyError:
            raise ParamError(f"parameter {name!r} is not registered") from None

    def names(self):
        return list(self.entries)

    def enabled_names(self, minibatch: int) -> list[str]:
        return [n for n, e in self.entries.items() if e.enabled(minibatch)]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: e.value.copy() for n, e in self.entries.items()}

    def load_values(self, values: dict) -> None:
        for n, v in values.items():
            self.entries[n].value = np.array(v, dtype=float)

    @property
    def kappa(self) -> float:
        return float(np.exp(self["kappa_log"][0]))

    def check_mode(self, mode: str) -> None:
        """Reject refinements that a runtime mode cannot carry out."""
        if mode in ("do", "h5") and "tilts" in self.entries:
            e = self.entries["tilts"]
            xz_nonzero = np.any(e.value[1:] != 0)
            xz_refined = e.refinable and (e.mask is None or np.any(e.mask[1:] != 0))
            if xz_nonzero or xz_refined:
                raise ParamError(
                    f"tilts about the x or z axis are not supported in {mode!r} mode; "
                    "use serial or dp, or mask rows 1 and 2 of the tilts parameter"
                )

    def update_all(self, grads: dict, minibatch: int) -> list[str]:
        """Step every enabled entry; returns the names whose update was rejected."""
        rejected = []
        for name, e in self.entries.items():
            if not e.enabled(minibatch) or name not in grads:
                continue
            g = np.asarray(grads[name], dtype=float)
            if e.mask is not None:
                g = g * e.mask
            if not np.all(np.isfinite(g)):
                rejected.append(name)
                log.warning("non-finite gradient for %s at minibatch %d; step rejected", name, minibatch)
                continue
            new = e.optimizer.step(e.value, g)
            if e.mask is not None:
                new = np.where(e.mask != 0, new, e.value)
            if not np.all(np.isfinite(new)):
                rejected.append(name)
                log.warning("non-finite update for %s at minibatch %d; step rejected", name, minibatch)
                continue
            if name == "probe_pos_correction":
                new = new - new.mean(axis=0, keepdims=True)
            e.value = new
        return rejected

    def record_traces(self) -> None:
        for e in self.entries.values():
            if e.refinable and e.value.size <= 64:
                e.trace.append(e.value.copy())

    def state_dict(self) -> dict:
        out = {}
        for n, e in self.entries.items():
            out[f"{n}/value"] = e.value
            if e.optimizer is not None:
                for k, v in e.optimizer.state_dict().items():
                    out[f"{n}/opt/{k}"] = v
        return out

    def load_state_dict(self, d: dict) -> None:
        for n, e in self.entries.items():
            if f"{n}/value" in d:
                e.value = np.array(d[f"{n}/value"], dtype=float)
            if e.optimizer is not None:
                prefix = f"{n}/opt/"
                sub = {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}
                if sub:
                    e.optimizer.load_state_dict(sub)


def registry_from_config(specs: dict, initial: dict) -> ParamRegistry:
    """Build a registry from ``{name: {optimizer, step_size, enable_at, mask}}``.

    ``initial`` supplies the starting value of every parameter the model
    needs; parameters without a spec are registered frozen.
    """
    reg = ParamRegistry()
    for name, value in initial.items():
        spec = specs.get(name)
        if spec is None or not spec.get("refine", True):
            reg.register(name, value)
            continue
        opts = {k: v for k, v in spec.items() if k not in ("optimizer", "step_size", "enable_at", "mask", "refine")}
        opt = make_optimizer(spec.get("optimizer", "adam"), spec["step_size"], **opts)
        reg.register(name, value, opt, spec.get("enable_at", 0), spec.get("mask"))
    unknown = set(specs) - set(initial)
    if unknown:
        raise ParamError(f"refinement requested for parameters the model does not use: {sorted(unknown)}")
    return reg
