"""Pinhole cameras, rigid motions, and the differentiable logits warp.

Conventions: pixel (u, v) is column u, row v, with integer coordinates at
pixel centres.  Camera axes are x right, y down, z forward.  A motion maps
points as ``p_dst = R @ p_src + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError
from .tensor import Tensor, linear_map, tensor

FORWARD_SPLAT = "forward_splat"
INVERSE_SAMPLE = "inverse_sample"
WARP_MODES = (FORWARD_SPLAT, INVERSE_SAMPLE)

SPLAT_EPS = 1e-4
# projected coordinates this close to an integer are snapped onto it
SNAP_TOL = 1e-6
ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive: {self.fx}, {self.fy}")

    def check_image(self, h: int, w: int) -> None:
        if not (0 <= self.cx < w and 0 <= self.cy < h):
            raise ContractError(f"principal point ({self.cx}, {self.cy}) outside {w}x{h}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


def _check_rotation(r: np.ndarray) -> None:
    if r.shape != (3, 3):
        raise ContractError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise ContractError("rotation is not orthonormal with det 1")


@dataclass(frozen=True, eq=False)
class Se3Motion:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Se3Motion":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def translate(cls, x: float, y: float, z: float) -> "Se3Motion":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "Se3Motion", atol: float = 1e-6) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, atol=atol)
                    and np.allclose(self.translation, other.translation, atol=atol))


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    x, y, z = axis / n
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def se3_compose(a: Se3Motion, b: Se3Motion) -> Se3Motion:
    """Apply ``b`` first, then ``a``."""
    _check_rotation(a.rotation)
    _check_rotation(b.rotation)
    return Se3Motion(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(m: Se3Motion) -> Se3Motion:
    _check_rotation(m.rotation)
    rt = m.rotation.T
    return Se3Motion(rt, -rt @ m.translation)


def relative_motion(pose_t: Se3Motion, pose_t1: Se3Motion) -> Se3Motion:
    """Motion from camera-t coordinates to camera-(t+1) coordinates.

    Both poses are camera-to-world.
    """
    return se3_compose(se3_inverse(pose_t1), pose_t)


# --------------------------------------------------------------------------
# pinhole


def unproject(u, v, depth, k: Intrinsics) -> np.ndarray:
    """Pixel coordinates plus depth to camera-frame points, shape (..., 3)."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ContractError("unproject needs positive depth")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d * np.ones_like(u)], axis=-1)


def project(points, k: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-frame points to (u, v, z). Points with z <= 0 get nan pixels."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        front = z > 0
        u = np.where(front, k.fx * x / np.where(front, z, 1.0) + k.cx, np.nan)
        v = np.where(front, k.fy * y / np.where(front, z, 1.0) + k.cy, np.nan)
    return u, v, z


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < SNAP_TOL, r, x)


def _reproject_grid(depth: np.ndarray, motion: Se3Motion, k: Intrinsics):
    h, w = depth.shape
    vs, us = np.mgrid[0:h, 0:w]
    pts = motion.apply(unproject(us, vs, depth, k))
    u, v, z = project(pts, k)
    return _snap(u).ravel(), _snap(v).ravel(), z.ravel()


def _bilinear(u: np.ndarray, v: np.ndarray, h: int, w: int, keep: np.ndarray):
    """Corner indices and weights for bilinear interpolation at (u, v).

    Returns (entry owner index into u, flat pixel index, weight) for every
    corner with nonzero weight that falls inside the grid.
    """
    owner = np.flatnonzero(keep)
    uu, vv = u[owner], v[owner]
    u0 = np.floor(uu)
    v0 = np.floor(vv)
    a = uu - u0
    b = vv - v0
    owners, pix, wts = [], [], []
    for du, dv, wt in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)),
                       (0, 1, (1 - a) * b), (1, 1, a * b)):
        cu = u0 + du
        cv = v0 + dv
        ok = (wt > 0) & (cu >= 0) & (cu <= w - 1) & (cv >= 0) & (cv <= h - 1)
        owners.append(owner[ok])
        pix.append((cv[ok] * w + cu[ok]).astype(np.int64))
        wts.append(wt[ok])
    return np.concatenate(owners), np.concatenate(pix), np.concatenate(wts)


def splat_matrix(depth: np.ndarray, motion: Se3Motion, k: Intrinsics) -> sp.csr_matrix:
    """Unnormalized bilinear splat weights, rows = target pixel, cols = source pixel."""
    h, w = depth.shape
    u, v, z = _reproject_grid(depth, motion, k)
    # generous bound keeps the int conversion safe; exact bounds are per corner
    keep = (z > 0) & (u > -1) & (u < w) & (v > -1) & (v < h)
    src, tgt, wt = _bilinear(u, v, h, w, keep)
    return sp.csr_matrix((wt, (tgt, src)), shape=(h * w, h * w))


def sample_matrix(depth: np.ndarray, motion: Se3Motion, k: Intrinsics):
    """Bilinear gather weights, rows = target pixel, cols = source pixel.

    ``depth`` is the target-frame depth and ``motion`` maps target camera
    coordinates into the source camera.
    """
    h, w = depth.shape
    u, v, z = _reproject_grid(depth, motion, k)
    valid = (z > 0) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    tgt, src, wt = _bilinear(u, v, h, w, valid)
    return sp.csr_matrix((wt, (tgt, src)), shape=(h * w, h * w)), valid.reshape(h, w)


def warp_operator(depth: np.ndarray, motion: Se3Motion, k: Intrinsics,
                  mode: str = FORWARD_SPLAT) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse (H*W, H*W) resampling matrix and the HxW boolean validity mask."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DimensionError(f"depth must be HxW, got {depth.shape}")
    if mode == FORWARD_SPLAT:
        s = splat_matrix(depth, motion, k)
        mass = np.asarray(s.sum(axis=1)).ravel()
        valid = mass > SPLAT_EPS
        inv = np.zeros_like(mass)
        inv[valid] = 1.0 / mass[valid]
        return (sp.diags(inv) @ s).tocsr(), valid.reshape(depth.shape)
    if mode == INVERSE_SAMPLE:
        return sample_matrix(depth, motion, k)
    raise ValueError(f"unknown warp mode {mode!r}")


def warp_logits(src, depth: np.ndarray | None = None, motion: Se3Motion | None = None,
                k: Intrinsics | None = None, mode: str = FORWARD_SPLAT,
                operator=None) -> tuple[Tensor, np.ndarray]:
    """Resample HxWxC logits into the other frame.

    forward_splat: ``depth`` is the source depth and ``motion`` maps source to
    target.  inverse_sample: ``depth`` is the target depth and ``motion`` maps
    target to source.  Invalid target pixels carry zero logits.  A prebuilt
    ``(matrix, validity)`` pair from :func:`warp_operator` may be passed as
    ``operator`` instead of the geometry.
    """
    if not isinstance(src, Tensor):
        src = tensor(src)
    if src.data.ndim != 3:
        raise DimensionError(f"logits must be HxWxC, got {src.shape}")
    if operator is None:
        if np.shape(depth) != src.shape[:2]:
            raise DimensionError(f"depth {np.shape(depth)} vs logits {src.shape}")
        operator = warp_operator(depth, motion, k, mode)
    matrix, valid = operator
    return linear_map(src, matrix), valid


def perturb(motion: Se3Motion, depth: np.ndarray, sigma_rot: float, sigma_trans: float,
            sigma_depth: float, seed: int) -> tuple[Se3Motion, np.ndarray]:
    """Corrupt oracle geometry to mimic learned-model error."""
    if min(sigma_rot, sigma_trans, sigma_depth) < 0:
        raise ContractError("perturbation sigmas must be nonnegative")
    depth = np.asarray(depth)
    if sigma_rot == 0 and sigma_trans == 0 and sigma_depth == 0:
        return motion, depth
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    angle = rng.normal(0.0, sigma_rot) if sigma_rot > 0 else 0.0
    dt = rng.normal(0.0, sigma_trans, size=3) if sigma_trans > 0 else np.zeros(3)
    rot = axis_angle(axis, angle) @ motion.rotation
    out_motion = Se3Motion(rot, motion.translation + dt)
    if sigma_depth > 0:
        factor = np.maximum(1.0 + rng.normal(0.0, sigma_depth, size=depth.shape), 1e-3)
        depth = (depth * factor).astype(depth.dtype)
    return out_motion, depth
