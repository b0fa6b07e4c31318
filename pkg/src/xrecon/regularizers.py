"""Priors on the object and the finite-support (shrink-wrap) mask.

Regularizer values are normalized by the voxel count N_o = Ly*Lx*Lz. The
subgradient of |x| at 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad


class EmptySupportError(ValueError):
    pass


def _n_voxels(obj) -> int:
    s = obj.shape
    return int(np.prod(s[:3]))


def _channels(obj, representation: str):
    """The two maps a regularizer acts on, each [Ly, Lx, Lz]."""
    if obj.shape[-1] == 1:
        # single stored channel (beta) with delta tied to it
        return np.zeros(obj.shape[:3]), ad.slice_(obj, (Ellipsis, 0))
    c0 = ad.slice_(obj, (Ellipsis, 0))
    c1 = ad.slice_(obj, (Ellipsis, 1))
    if representation == "delta_beta":
        return c0, c1
    if representation != "real_imag":
        raise ValueError(f"unknown representation {representation!r}")
    mag = ad.sqrt(ad.add(ad.mul(c0, c0), ad.mul(c1, c1)))
    dev = ad.sub(mag, ad.mean(mag))
    return dev, ad.atan2(c1, c0)


def reg_l1(obj, alpha1: float, alpha2: float, representation: str = "delta_beta"):
    if alpha1 < 0 or alpha2 < 0:
        raise ValueError("l1 weights must be non-negative")
    a, b = _channels(obj, representation)
    total = ad.add(ad.mul(alpha1, ad.sum_(ad.abs_(a))), ad.mul(alpha2, ad.sum_(ad.abs_(b))))
    return ad.div(total, float(_n_voxels(obj)))


@dataclass
class ReweightState:
    """Adaptive l1 weights; treated as constants by the tape."""

    eps: float = 1e-3
    cadence: int | None = None  # minibatches between refreshes; None = once per epoch
    weights: tuple | None = None
    last_refresh: int | None = None

    def refresh(self, obj: np.ndarray, representation: str = "delta_beta", global_max=None) -> None:
        maps = [np.abs(m) for m in _channels(np.asarray(obj), representation)]
        mx = [m.max() for m in maps] if global_max is None else list(global_max)
        self.weights = tuple(m_max / (m + self.eps) for m_max, m in zip(mx, maps))

    def due(self, minibatch: int, epoch_start: bool) -> bool:
        if self.weights is None:
            return True
        if self.cadence is None:
            return epoch_start
        return self.last_refresh is None or minibatch - self.last_refresh >= self.cadence


def reg_reweighted_l1(obj, alpha1: float, alpha2: float, state: ReweightState,
                      representation: str = "delta_beta"):
    if state.weights is None:
        state.refresh(ad.value_of(obj), representation)
    a, b = _channels(obj, representation)
    w1, w2 = state.weights
    total = ad.add(
        ad.mul(alpha1, ad.sum_(ad.mul(w1, ad.abs_(a)))),
        ad.mul(alpha2, ad.sum_(ad.mul(w2, ad.abs_(b)))),
    )
    return ad.div(total, float(_n_voxels(obj)))


def _forward_diff(c, axis):
    """Forward difference with zero at the far boundary."""
    n = c.shape[axis]
    if n < 2:
        return None
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    return ad.sub(ad.slice_(c, tuple(hi)), ad.slice_(c, tuple(lo)))


def _tv_map(c):
    total = 0.0
    for axis in range(3):
        d = _forward_diff(c, axis)
        if d is not None:
            total = ad.add(total, ad.sum_(ad.abs_(d)))
    return total


def reg_tv(obj, gamma: float, representation: str = "delta_beta"):
    """Anisotropic total variation of both channels (or of the derived maps)."""
    if gamma < 0:
        raise ValueError("TV weight must be non-negative")
    a, b = _channels(obj, representation)
    total = ad.add(_tv_map(a), _tv_map(b))
    return ad.mul(total, gamma / _n_voxels(obj))


@dataclass
class L1:
    alpha1: float
    alpha2: float
    kind: str = field(default="l1", init=False)

    def __call__(self, obj, representation):
        return reg_l1(obj, self.alpha1, self.alpha2, representation)


@dataclass
class ReweightedL1:
    alpha1: float
    alpha2: float
    state: ReweightState = field(default_factory=ReweightState)
    kind: str = field(default="reweighted_l1", init=False)

    def __call__(self, obj, representation):
        return reg_reweighted_l1(obj, self.alpha1, self.alpha2, self.state, representation)


@dataclass
class TV:
    gamma: float
    kind: str = field(default="tv", init=False)

    def __call__(self, obj, representation):
        return reg_tv(obj, self.gamma, representation)


def make_regularizer(spec: dict):
    kind = spec["type"]
    if kind == "l1":
        return L1(float(spec.get("alpha1", 0.0)), float(spec.get("alpha2", 0.0)))
    if kind == "reweighted_l1":
        state = ReweightState(eps=float(spec.get("eps", 1e-3)), cadence=spec.get("cadence"))
        return ReweightedL1(float(spec.get("alpha1", 0.0)), float(spec.get("alpha2", 0.0)), state)
    if kind == "tv":
        return TV(float(spec["gamma"]))
    raise ValueError(f"unknown regularizer type {kind!r}")


# --- finite support ---------------------------------------------------------------


@dataclass
class SupportMask:
    mask: np.ndarray  # [Ly, Lx] of {0, 1}
    threshold: float = 0.1
    sigma: float = 1.0


def object_strength(obj: np.ndarray, representation: str) -> np.ndarray:
    """Lateral map of how far each column departs from vacuum."""
    obj = np.asarray(obj)
    if representation == "delta_beta":
        per_voxel = np.hypot(obj[..., 0], obj[..., 1])
    else:
        per_voxel = np.hypot(obj[..., 0] - 1.0, obj[..., 1])
    return per_voxel.sum(axis=2)


def shrink_wrap(obj: np.ndarray, mask: SupportMask, representation: str = "delta_beta") -> SupportMask:
    """New support from the Gaussian-smoothed object, thresholded at a fraction of its max."""
    strength = object_strength(obj, representation)
    smooth = gaussian_filter(strength, mask.sigma, mode="constant")
    peak = smooth.max()
    new = (smooth >= mask.threshold * peak).astype(float) if peak > 0 else np.ones_like(smooth)
    if mask.threshold <= 0:
        new = np.ones_like(smooth)
    if not new.any():
        raise EmptySupportError("shrink-wrap produced an empty support; threshold too aggressive")
    return SupportMask(new, mask.threshold, mask.sigma)


def apply_support(obj: np.ndarray, mask: SupportMask, representation: str = "delta_beta") -> np.ndarray:
    """Reset voxels outside the support to vacuum."""
    obj = np.array(obj, dtype=float)
    outside = mask.mask == 0
    fill = [1.0, 0.0] if representation == "real_imag" else [0.0, 0.0]
    obj[outside] = np.asarray(fill[: obj.shape[-1]])
    return obj
