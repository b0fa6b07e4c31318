"""Differentiable geometric resampling: rotation, affine warps, and the
affine distance metric.

All warps are inverse maps: every output pixel is pulled from the source
image at a transformed coordinate using bilinear interpolation. Rotations and
affine maps are anchored at the geometric center (N - 1) / 2 of each axis.
"""

from __future__ import annotations

from dataclasses import dataclass, astuple

import numpy as np

from . import autodiff as ad

AXES = ("y", "x", "z")
# plane axes (row, col) of a [Ly, Lx, Lz, C] volume that a rotation about each axis mixes
_PLANES = {"y": (1, 2), "x": (0, 2), "z": (0, 1)}


def vacuum_fill(representation: str, channels: int = 2) -> np.ndarray:
    if representation == "real_imag":
        return np.array([1.0, 0.0][:channels])
    return np.zeros(channels)


def bilinear_sample(image, coords, fill=0.0):
    """Sample ``image[..., H, W]`` at ``coords = (rows, cols)`` in source pixels."""
    cy, cx = coords
    return ad.bilinear_sample(image, cy, cx, fill)


@dataclass(frozen=True)
class AffineParams:
    phi: float = 0.0
    c_x: float = 0.0
    c_y: float = 0.0
    s_x: float = 1.0
    s_y: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if not (self.s_x > 0 and self.s_y > 0):
            raise ValueError(f"scale factors must be positive, got {self.s_x}, {self.s_y}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a) -> "AffineParams":
        return cls(*[float(v) for v in np.asarray(a).reshape(7)])


IDENTITY_AFFINE = AffineParams().as_array()


def affine_matrix(p: AffineParams) -> np.ndarray:
    """A = R(phi) @ Shear(c) @ Scale(S) @ Translate(d), in that order."""
    c, s = np.cos(p.phi), np.sin(p.phi)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    shear = np.array([[1, p.c_x, 0], [p.c_y, 1, 0], [0, 0, 1.0]])
    scale = np.array([[p.s_x, 0, 0], [0, p.s_y, 0], [0, 0, 1.0]])
    trans = np.array([[1, 0, p.dx], [0, 1, p.dy], [0, 0, 1.0]])
    return rot @ shear @ scale @ trans


def _centered_grid(shape):
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return yy - (h - 1) / 2.0, xx - (w - 1) / 2.0


def _warp(image, minv, fill):
    """out(x, y) = image(Minv @ (x, y, 1)) in centered (col, row) coordinates.

    ``minv`` is a 2x3 nested list whose entries may be floats or Vars.
    """
    h, w = image.shape[-2:]
    uy, ux = _centered_grid((h, w))
    src_x = ad.add(ad.add(ad.mul(minv[0][0], ux), ad.mul(minv[0][1], uy)), minv[0][2])
    src_y = ad.add(ad.add(ad.mul(minv[1][0], ux), ad.mul(minv[1][1], uy)), minv[1][2])
    src_x = ad.add(src_x, (w - 1) / 2.0)
    src_y = ad.add(src_y, (h - 1) / 2.0)
    return ad.bilinear_sample(image, src_y, src_x, fill)


def apply_affine(image, a: np.ndarray, fill=0.0):
    """Warp ``image`` by the 3x3 (or 2x3) affine matrix ``a``."""
    a = np.asarray(a, dtype=float)
    if a.shape == (2, 3):
        a = np.vstack([a, [0, 0, 1.0]])
    if abs(np.linalg.det(a[:2, :2])) < 1e-12:
        raise np.linalg.LinAlgError("affine matrix is singular")
    inv = np.linalg.inv(a)
    return _warp(image, inv[:2].tolist(), fill)


def apply_affine_params(image, params, fill=0.0):
    """Warp by the matrix composed from a length-7 parameter vector.

    ``params`` = [phi, c_x, c_y, s_x, s_y, dx, dy] as array or Var; the inverse
    is assembled factor by factor so every parameter stays differentiable.
    """
    p = [ad.slice_(params, i) for i in range(7)]
    phi, cx, cy, sx, sy, dx, dy = p
    c, s = ad.cos(phi), ad.sin(phi)
    # inverse rotation
    r = [[c, s], [ad.neg(s), c]]
    # inverse shear
    det = ad.sub(1.0, ad.mul(cx, cy))
    sh = [[ad.div(1.0, det), ad.div(ad.neg(cx), det)], [ad.div(ad.neg(cy), det), ad.div(1.0, det)]]
    shr = _mat2(sh, r)
    lin = [[ad.div(shr[0][0], sx), ad.div(shr[0][1], sx)], [ad.div(shr[1][0], sy), ad.div(shr[1][1], sy)]]
    minv = [[lin[0][0], lin[0][1], ad.neg(dx)], [lin[1][0], lin[1][1], ad.neg(dy)]]
    return _warp(image, minv, fill)


def _mat2(a, b):
    return [
        [ad.add(ad.mul(a[i][0], b[0][j]), ad.mul(a[i][1], b[1][j])) for j in range(2)]
        for i in range(2)
    ]


def d_affine(a_r: np.ndarray, a_0: np.ndarray) -> float:
    """|A_r A_0 r0 - r0| / |r0| with r0 = (1, 1) in homogeneous coordinates."""
    a_r = _as3(a_r)
    a_0 = _as3(a_0)
    r0 = np.array([1.0, 1.0, 1.0])
    v = (a_r @ a_0 @ r0)[:2] - r0[:2]
    return float(np.linalg.norm(v) / np.linalg.norm(r0[:2]))


def normalized_affine(a: np.ndarray, shape) -> np.ndarray:
    """Express a pixel-frame affine matrix in coordinates where the image spans unit length.

    Linear parts are unchanged; translations are divided by the image width
    (x) and height (y), so metric values do not depend on the pixel count.
    """
    h, w = shape[:2]
    d = np.diag([1.0 / w, 1.0 / h, 1.0])
    return d @ _as3(a) @ np.linalg.inv(d)


def _as3(a):
    a = np.asarray(a, dtype=float)
    if a.shape == (2, 3):
        return np.vstack([a, [0, 0, 1.0]])
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 or 2x3 matrix, got {a.shape}")
    return a


def _rotation_coords(theta, shape):
    """Source (row, col) coordinates for rotating a plane by ``theta``."""
    up, uq = _centered_grid(shape)
    c, s = ad.cos(theta), ad.sin(theta)
    p0 = ad.sub(ad.mul(c, up), ad.mul(s, uq))
    q0 = ad.add(ad.mul(s, up), ad.mul(c, uq))
    return ad.add(p0, (shape[0] - 1) / 2.0), ad.add(q0, (shape[1] - 1) / 2.0)


def rotate(volume, theta, axis: str = "y", fill=0.0):
    """Rotate a [Ly, Lx, Lz, C] volume by ``theta`` radians about ``axis``.

    ``fill`` is the per-channel value of voxels that enter from outside.
    """
    if axis not in _PLANES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    p_ax, q_ax = _PLANES[axis]
    other = ({0, 1, 2} - {p_ax, q_ax}).pop()
    perm = (other, 3, p_ax, q_ax)
    moved = ad.transpose(volume, perm)
    shape = moved.shape
    cy, cx = _rotation_coords(theta, shape[2:])
    fill_arr = np.broadcast_to(np.asarray(fill, dtype=float), (shape[1],))
    fill_arr = np.broadcast_to(fill_arr, shape[:2])
    out = ad.bilinear_sample(moved, cy, cx, fill_arr)
    return ad.transpose(out, np.argsort(perm))


def rotate_adjoint(grad_volume: np.ndarray, theta: float, axis: str = "y", fill=0.0) -> np.ndarray:
    """Transpose of :func:`rotate` applied to ``grad_volume`` (theta fixed)."""
    tape = ad.Tape()
    v = tape.leaf("v", np.zeros_like(grad_volume))
    out = rotate(v, float(theta), axis, fill)
    loss = ad.sum_(ad.mul(out, grad_volume))
    return ad.gradient(tape, loss, ["v"])["v"]


def rotate_with_grad(volume: np.ndarray, theta: float, grad_rotated: np.ndarray,
                     axis: str = "y", fill=0.0) -> tuple[np.ndarray, float]:
    """Pull a gradient w.r.t. a rotated volume back to the volume and the angle."""
    tape = ad.Tape()
    v = tape.leaf("v", volume)
    t = tape.leaf("theta", np.asarray(theta, dtype=float))
    out = rotate(v, t, axis, fill)
    loss = ad.sum_(ad.mul(out, grad_rotated))
    g = ad.gradient(tape, loss, ["v", "theta"])
    return g["v"], float(g["theta"])
