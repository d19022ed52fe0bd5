"""Pinhole camera model, inverse-depth coordinates and SE(3) algebra.

Axis convention: x right, y down, z forward (optical axis). Depth images are
stored in raw sensor units; ``Intrinsics.depth_scale`` gives millimetres per
unit. All geometry below works in metres.

A point in inverse-depth coordinates is ``(u, v, 1, q)`` with ``u = x/z``,
``v = y/z`` and ``q = 1/z``. Functions accept scalars or arrays and broadcast.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import BehindCameraError, InvalidDepthError, ValidationError

# Generator matrices of se(3): translations along x, y, z then rotations
# about x, y, z.
GENERATORS = np.zeros((6, 4, 4))
GENERATORS[0, 0, 3] = 1.0
GENERATORS[1, 1, 3] = 1.0
GENERATORS[2, 2, 3] = 1.0
GENERATORS[3, 1, 2], GENERATORS[3, 2, 1] = -1.0, 1.0
GENERATORS[4, 0, 2], GENERATORS[4, 2, 0] = 1.0, -1.0
GENERATORS[5, 0, 1], GENERATORS[5, 1, 0] = -1.0, 1.0
GENERATORS.setflags(write=False)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    ic: float
    jc: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.ic < self.width and 0 <= self.jc < self.height):
            raise ValidationError("principal point outside the image")
        if self.depth_scale <= 0:
            raise ValidationError("depth_scale must be positive")

    @classmethod
    def default(cls, width=640, height=480):
        """fx = fy = 525 at VGA, principal point at the image centre, scaled
        proportionally for other sizes."""
        s = width / 640.0
        return cls(525.0 * s, 525.0 * s, width / 2.0, height / 2.0, width, height)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def to_meters(self):
        """Metres per stored depth unit."""
        return self.depth_scale / 1000.0

    def scaled(self, factor):
        return Intrinsics(self.fx * factor, self.fy * factor, self.ic * factor,
                          self.jc * factor, int(round(self.width * factor)),
                          int(round(self.height * factor)), self.depth_scale)

    def digest(self) -> bytes:
        """8-byte fingerprint used in wire handshakes and containers."""
        text = "fx={!r};fy={!r};ic={!r};jc={!r};w={};h={};ds={!r}".format(
            float(self.fx), float(self.fy), float(self.ic), float(self.jc),
            self.width, self.height, float(self.depth_scale))
        return hashlib.sha256(text.encode()).digest()[:8]


class InverseDepthPoint(NamedTuple):
    u: np.ndarray | float
    v: np.ndarray | float
    q: np.ndarray | float


def as_depth(arr, K: Intrinsics | None = None) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValidationError(f"depth image must be 2-D, got shape {arr.shape}")
    if K is not None and arr.shape != K.shape:
        raise ValidationError(f"depth image {arr.shape} does not match intrinsics {K.shape}")
    return arr.astype(np.uint16, copy=False)


def as_color(arr, K: Intrinsics | None = None) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"color image must be HxWx3, got shape {arr.shape}")
    if K is not None and arr.shape[:2] != K.shape:
        raise ValidationError(f"color image {arr.shape} does not match intrinsics {K.shape}")
    return arr.astype(np.uint8, copy=False)


def pixel_to_uvq(i, j, z, K: Intrinsics) -> InverseDepthPoint:
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise InvalidDepthError("depth must be positive (0 marks an invalid sample)")
    u = (np.asarray(i, dtype=float) - K.ic) / K.fx
    v = (np.asarray(j, dtype=float) - K.jc) / K.fy
    q = 1.0 / (z * K.to_meters)
    return InverseDepthPoint(u, v, q)


def uvq_to_pixel(p: InverseDepthPoint, K: Intrinsics):
    """Return sub-pixel ``(i, j, z)`` with ``z`` in metres."""
    q = np.asarray(p.q, dtype=float)
    if np.any(q <= 0):
        raise BehindCameraError("inverse depth must be positive")
    return (np.asarray(p.u) * K.fx + K.ic, np.asarray(p.v) * K.fy + K.jc, 1.0 / q)


def backproject(i, j, z, K: Intrinsics) -> np.ndarray:
    """Euclidean points (..., 3) in metres for pixels with raw depth ``z``.

    No validity check; invalid depths map to the origin.
    """
    zm = np.asarray(z, dtype=float) * K.to_meters
    x = (np.asarray(i, dtype=float) - K.ic) / K.fx * zm
    y = (np.asarray(j, dtype=float) - K.jc) / K.fy * zm
    return np.stack(np.broadcast_arrays(x, y, zm), axis=-1)


def depth_to_points(Z: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Per-pixel point cloud (H, W, 3); invalid pixels are zero."""
    jj, ii = np.indices(Z.shape)
    return backproject(ii, jj, Z, K)


def project(X: np.ndarray, K: Intrinsics):
    """Sub-pixel ``(i, j)`` and depth in metres of points (..., 3). Points with
    z <= 0 yield NaN coordinates."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(z > 0, 1.0 / z, np.nan)
    return X[..., 0] * inv * K.fx + K.ic, X[..., 1] * inv * K.fy + K.jc, z


def skew(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3) mapping points as ``x -> R x + t`` (metres)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("non-finite rigid transform")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValidationError("rotation block is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M, orthonormalize=False):
        M = np.asarray(M, dtype=float)
        R = M[:3, :3]
        if orthonormalize:
            U, _, Vt = np.linalg.svd(R)
            R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
        return cls(R, M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        R = self.rotation @ other.rotation
        # re-orthonormalize so long products stay inside the 1e-9 invariant
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
        return RigidTransform(R, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        return se3_invert(self)

    def apply(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.rotation.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_array(self) -> np.ndarray:
        """12 reals: rotation row-major then translation."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(a[:9].reshape(3, 3), a[9:12])

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"RigidTransform(angle={np.degrees(self.angle()):.4f}deg, t={self.translation.round(6).tolist()})"


def se3_exp(b) -> RigidTransform:
    """Exponential map of the motion vector ``(t_x, t_y, t_z, w_x, w_y, w_z)``.

    Closed form: Rodrigues for the rotation block, left Jacobian of SO(3) for
    the translation coupling.
    """
    b = np.asarray(b, dtype=float).reshape(6)
    if not np.all(np.isfinite(b)):
        raise ValidationError("motion vector must be finite")
    rho, w = b[:3], b[3:]
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    W = skew(w)
    W2 = W @ W
    if theta < 1e-4:
        # Taylor expansions, truncation error below 1e-17 at this angle
        A = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        B = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        C = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        A = np.sin(theta) / theta
        B = (1.0 - np.cos(theta)) / theta2
        C = (theta - np.sin(theta)) / (theta2 * theta)
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    U, _, Vt = np.linalg.svd(R)
    return RigidTransform(U @ Vt, V @ rho)


def se3_invert(M: RigidTransform) -> RigidTransform:
    Rt = M.rotation.T
    return RigidTransform(Rt, -Rt @ M.translation)


def se3_apply_uvq(M: RigidTransform, p: InverseDepthPoint) -> InverseDepthPoint:
    """Warp an inverse-depth point: ``[u' v' 1 q'] ~ M [u v 1 q]``."""
    u, v, q = (np.asarray(c, dtype=float) for c in p)
    if np.any(q <= 0):
        raise BehindCameraError("inverse depth must be positive")
    u2, v2, w2, q2 = _transform_uvq(M, u, v, q)
    if np.any(w2 <= 0):
        raise BehindCameraError("point lands behind the destination camera")
    return InverseDepthPoint(u2 / w2, v2 / w2, q2 / w2)


def _transform_uvq(M: RigidTransform, u, v, q):
    R, t = M.rotation, M.translation
    x = R[0, 0] * u + R[0, 1] * v + R[0, 2] + t[0] * q
    y = R[1, 0] * u + R[1, 1] * v + R[1, 2] + t[1] * q
    w = R[2, 0] * u + R[2, 1] * v + R[2, 2] + t[2] * q
    return x, y, w, q


def warp_pixels(M: RigidTransform, i, j, z, K: Intrinsics):
    """Warp pixels with raw depth ``z`` (all > 0) through ``M``.

    Returns sub-pixel destination ``(i, j)``, destination depth in metres and
    a mask of points that land in front of the destination camera.
    """
    u, v, q = pixel_to_uvq(i, j, z, K)
    x, y, w, q = _transform_uvq(M, u, v, q)
    ok = w > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(ok, 1.0 / w, np.nan)
    return x * inv * K.fx + K.ic, y * inv * K.fy + K.jc, w / q, ok
