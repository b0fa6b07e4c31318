"""Update rules: GD with step halving, momentum, Adam, and Polak-Ribiere CG.

Elementwise optimizers keep their per-element buffers in a plain dict and a
step counter outside it, so a caller holding only a slice of a parameter (a
slab, or one HDF5 slice) can apply the same update to that slice alone and
advance the counter once for the whole tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class NonFiniteGradientError(ValueError):
    pass


def _as_step(step_size):
    """A scalar step, or a per-element array broadcast against the parameter."""
    a = np.asarray(step_size, dtype=float)
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError(f"step size must be finite and non-negative, got {step_size}")
    return float(a) if a.ndim == 0 else a


@dataclass
class OptState:
    buffers: dict = field(default_factory=dict)
    iteration: int = 0
    extra: dict = field(default_factory=dict)


class Optimizer:
    name = "base"
    buffer_names: tuple = ()
    elementwise = True

    def __init__(self, step_size):
        self.step_size = _as_step(step_size)
        self.state = OptState()

    def init_buffers(self, shape) -> dict:
        return {b: np.zeros(shape) for b in self.buffer_names}

    def apply(self, x: np.ndarray, g: np.ndarray, buffers: dict, iteration: int) -> np.ndarray:
        """Return the updated ``x``; ``buffers`` are modified in place."""
        raise NotImplementedError

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        if x.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {x.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"{self.name}: non-finite gradient")
        if not self.state.buffers:
            self.state.buffers = self.init_buffers(x.shape)
        out = self.apply(x, g, self.state.buffers, self.state.iteration)
        self.state.iteration += 1
        return out

    def state_dict(self) -> dict:
        return {"iteration": self.state.iteration, **{f"buf/{k}": v for k, v in self.state.buffers.items()},
                **{f"extra/{k}": v for k, v in self.state.extra.items()}}

    def load_state_dict(self, d: dict) -> None:
        self.state = OptState(
            {k[4:]: np.array(v) for k, v in d.items() if k.startswith("buf/")},
            int(d.get("iteration", 0)),
            {k[6:]: v for k, v in d.items() if k.startswith("extra/")},
        )


class GD(Optimizer):
    """x <- x - rho_t g, with rho halved at iterations N_bi * (2^(S+1) - 1)."""

    name = "gd"

    def __init__(self, step_size: float, base_iters: int | None = None):
        super().__init__(step_size)
        self.base_iters = base_iters

    def halving_points(self, upto: int) -> list[int]:
        if not self.base_iters:
            return []
        pts, s = [], 0
        while True:
            p = self.base_iters * (2 ** (s + 1) - 1)
            if p > upto:
                return pts
            pts.append(p)
            s += 1

    def step_size_at(self, iteration: int) -> float:
        return self.step_size * 0.5 ** len(self.halving_points(iteration))

    def apply(self, x, g, buffers, iteration):
        return x - self.step_size_at(iteration) * g


class Momentum(Optimizer):
    name = "momentum"
    buffer_names = ("v",)

    def __init__(self, step_size: float, gamma: float = 0.9):
        super().__init__(step_size)
        self.gamma = float(gamma)

    def apply(self, x, g, buffers, iteration):
        v = buffers["v"]
        v *= self.gamma
        v += self.step_size * g
        return x - v


class Adam(Optimizer):
    name = "adam"
    buffer_names = ("m", "v")

    def __init__(self, step_size: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(step_size)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    def apply(self, x, g, buffers, iteration):
        t = iteration + 1
        m, v = buffers["m"], buffers["v"]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return x - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


class LineSearchFailure(RuntimeError):
    pass


class CG(Optimizer):
    """Nonlinear conjugate gradient (Polak-Ribiere, clamped at zero).

    The step along the search direction comes from a backtracking Armijo
    search whose first trial is refined by quadratic interpolation, so the
    step is exact on quadratic losses.
    """

    name = "cg"
    elementwise = False

    def __init__(self, step_size: float = 1.0, c1: float = 1e-4, shrink: float = 0.5, max_shrinks: int = 30):
        super().__init__(step_size)
        if not isinstance(self.step_size, float):
            raise ValueError("conjugate gradient takes a scalar initial step")
        self.c1 = c1
        self.shrink = shrink
        self.max_shrinks = max_shrinks

    def direction(self, g: np.ndarray) -> tuple[np.ndarray, float]:
        g_prev = self.state.extra.get("g_prev")
        d_prev = self.state.extra.get("d_prev")
        if g_prev is None:
            return -g, 0.0
        denom = float(np.vdot(g_prev, g_prev))
        beta = max(0.0, float(np.vdot(g, g - g_prev)) / denom) if denom > 0 else 0.0
        return -g + beta * d_prev, beta

    def _search(self, x, f0, g, d, loss_fn):
        slope = float(np.vdot(g, d))
        if slope >= 0:
            return None
        alpha = float(self.state.extra.get("alpha", self.step_size))
        f_a = loss_fn(x + alpha * d)
        curv = f_a - f0 - slope * alpha
        if np.isfinite(f_a) and curv > 0:
            alpha_q = -slope * alpha**2 / (2 * curv)
            if alpha_q > 0:
                alpha = alpha_q
                f_a = loss_fn(x + alpha * d)
        for _ in range(self.max_shrinks + 1):
            if np.isfinite(f_a) and f_a <= f0 + self.c1 * alpha * slope:
                return alpha
            alpha *= self.shrink
            f_a = loss_fn(x + alpha * d)
        return None

    def cg_step(self, x: np.ndarray, loss_fn: Callable[[np.ndarray], float], g: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("cg: non-finite gradient")
        f0 = float(loss_fn(x))
        d, beta = self.direction(g)
        alpha = self._search(x, f0, g, d, loss_fn)
        if alpha is None and beta != 0.0:
            # stagnation: fall back to steepest descent once
            d = -g
            alpha = self._search(x, f0, g, d, loss_fn)
        self.state.iteration += 1
        if alpha is None:
            self.state.extra.update(g_prev=None, d_prev=None)
            self.state.extra["stalled"] = True
            return x
        self.state.extra.update(g_prev=g.copy(), d_prev=d.copy(), alpha=2.0 * alpha, stalled=False)
        return x + alpha * d

    def step(self, x, g):
        raise TypeError("CG needs a loss function; call cg_step(x, loss_fn, g)")

    def state_dict(self) -> dict:
        d = {"iteration": self.state.iteration}
        for k in ("g_prev", "d_prev"):
            if self.state.extra.get(k) is not None:
                d[f"extra/{k}"] = self.state.extra[k]
        if "alpha" in self.state.extra:
            d["extra/alpha"] = np.asarray(self.state.extra["alpha"])
        return d

    def load_state_dict(self, d: dict) -> None:
        super().load_state_dict(d)
        if "alpha" in self.state.extra:
            self.state.extra["alpha"] = float(np.asarray(self.state.extra["alpha"]))


def gd_step(x, g, opt: GD):
    return opt.step(x, g)


def momentum_step(x, g, opt: Momentum):
    return opt.step(x, g)


def adam_step(x, g, opt: Adam):
    return opt.step(x, g)


def cg_step(x, loss_fn, g, opt: CG):
    return opt.cg_step(x, loss_fn, g)


OPTIMIZERS = {"gd": GD, "momentum": Momentum, "adam": Adam, "cg": CG}


def make_optimizer(name: str, step_size: float, **options) -> Optimizer:
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None
    return cls(step_size, **options)
