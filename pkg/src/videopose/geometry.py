"""Rigid-body pose algebra and the radial camera models.

Poses map camera coordinates to world coordinates (``p_world = R @ p_cam + t``).
Twists are 6-vectors ``(rho, omega)``, translation part first, and updates are
applied on the left: ``T <- exp(xi) @ T``.

Both camera models share a single focal length and a principal point fixed at
the image centre. The unified model projects ``(x, y, z)`` as
``f * (x, y) / (z + alpha * |X|) + (W/2, H/2)``, which equals
``f * q(theta) * (cos phi, sin phi)`` with ``q(theta) = tan(theta) /
(1 + alpha * sqrt(tan(theta)**2 + 1))``; ``alpha = 0`` is the pinhole model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import DegeneratePoint, InvalidDepth

PINHOLE = "pinhole"
UNIFIED = "unified"
CAMERA_MODELS = (PINHOLE, UNIFIED)

# theta cap for the unified model (89.5 degrees).
MAX_THETA = math.radians(89.5)
_COS_MAX_THETA = math.cos(MAX_THETA)
_TAN_MAX_THETA = math.tan(MAX_THETA)


# --------------------------------------------------------------------------
# SO(3) / SE(3)
# --------------------------------------------------------------------------


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a (..., 3) vector."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return (
        np.eye(3)
        + math.sin(theta) / theta * W
        + (1.0 - math.cos(theta)) / theta**2 * W @ W
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    q = quat_from_matrix(R)
    return _quat_log(q)


def _quat_log(q: np.ndarray) -> np.ndarray:
    # q = (w, x, y, z), canonicalised to w >= 0 so the angle lies in [0, pi]
    if q[0] < 0:
        q = -q
    w = q[0]
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v / w
    angle = 2.0 * math.atan2(s, w)
    return angle * v / s


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta**2 * W
        + (theta - math.sin(theta)) / theta**3 * W @ W
    )


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * W + coef * W @ W


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as a unit quaternion (w, x, y, z) and a translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())
        object.__setattr__(self, "_R", matrix_from_quat(q))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(quat_from_matrix(R), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi) -> "Pose":
        xi = np.asarray(xi, dtype=float).reshape(6)
        rho, omega = xi[:3], xi[3:]
        return cls.from_rt(so3_exp(omega), _left_jacobian(omega) @ rho)

    def log(self) -> np.ndarray:
        omega = _quat_log(self.q)
        rho = _left_jacobian_inv(omega) @ self.t
        return np.concatenate([rho, omega])

    @property
    def R(self) -> np.ndarray:
        return self._R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self._R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -self._R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        return Pose.from_rt(self._R @ other._R, self._R @ other.t + self.t)

    __matmul__ = compose

    def act(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return np.asarray(points) @ self._R.T + self.t

    def retract(self, xi) -> "Pose":
        """Left-multiplicative update ``exp(xi) @ self``."""
        return Pose.exp(xi) @ self

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(_quat_log(self.q)))

    def tum_quaternion(self) -> np.ndarray:
        """Quaternion in TUM order (qx, qy, qz, qw)."""
        return np.array([self.q[1], self.q[2], self.q[3], self.q[0]])

    @classmethod
    def from_tum(cls, t, qxyzw) -> "Pose":
        qx, qy, qz, qw = qxyzw
        return cls(np.array([qw, qx, qy, qz]), t)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol, rtol=0.0))

    def __repr__(self) -> str:
        return f"Pose(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


def interpolate(a: Pose, b: Pose, s: float) -> Pose:
    """Constant-velocity interpolation (s in [0, 1]) or extrapolation (s > 1)."""
    return a @ Pose.exp(s * (a.inverse() @ b).log())


# --------------------------------------------------------------------------
# Camera models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    model: str
    f: float
    width: float
    height: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.model not in CAMERA_MODELS:
            raise ValueError(f"unknown camera model {self.model!r}")
        if not (self.f > 0 and math.isfinite(self.f)):
            raise ValueError("focal length must be positive")
        if not (0.0 <= self.alpha < 1.0):
            raise ValueError("alpha must lie in [0, 1)")
        if self.model == PINHOLE and self.alpha != 0.0:
            raise ValueError("pinhole intrinsics carry no alpha")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def pinhole(cls, f: float, width: float, height: float) -> "Intrinsics":
        return cls(PINHOLE, float(f), width, height)

    @classmethod
    def unified(cls, f: float, alpha: float, width: float, height: float) -> "Intrinsics":
        return cls(UNIFIED, float(f), width, height, float(alpha))

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def num_params(self) -> int:
        return 1 if self.model == PINHOLE else 2

    @property
    def params(self) -> np.ndarray:
        if self.model == PINHOLE:
            return np.array([self.f])
        return np.array([self.f, self.alpha])

    def with_params(self, params) -> "Intrinsics":
        params = np.asarray(params, dtype=float)
        if self.model == PINHOLE:
            return replace(self, f=float(params[0]))
        return replace(self, f=float(params[0]), alpha=float(params[1]))

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the image resampled by ``1 / factor`` (e.g. 8 for the BA grid)."""
        return replace(self, f=self.f / factor, width=self.width / factor, height=self.height / factor)

    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def horizontal_fov(self) -> float:
        """Field of view in radians, measured as ``2 * atan(W / 2f)``."""
        return 2.0 * math.atan(self.width / (2.0 * self.f))

    def as_pinhole(self) -> "Intrinsics":
        return Intrinsics.pinhole(self.f, self.width, self.height)


def _denominator(X: np.ndarray, k: Intrinsics):
    z = X[..., 2]
    if k.model == PINHOLE or k.alpha == 0.0:
        norm = np.linalg.norm(X, axis=-1) if k.model == UNIFIED else None
        return z, norm
    norm = np.linalg.norm(X, axis=-1)
    return z + k.alpha * norm, norm


def project_points(X: np.ndarray, k: Intrinsics):
    """Vectorised projection. Returns ``(uv, valid)``; invalid entries hold finite junk."""
    X = np.asarray(X, dtype=float)
    den, norm = _denominator(X, k)
    z = X[..., 2]
    if k.model == PINHOLE:
        valid = z > 0
    else:
        valid = (z > norm * _COS_MAX_THETA) & (den > 0)
    safe = np.where(valid, den, 1.0)
    uv = np.empty(X.shape[:-1] + (2,))
    uv[..., 0] = k.f * X[..., 0] / safe + k.cx
    uv[..., 1] = k.f * X[..., 1] / safe + k.cy
    return uv, valid


def project(point, k: Intrinsics) -> np.ndarray:
    uv, valid = project_points(np.asarray(point, dtype=float), k)
    if not np.all(valid):
        raise DegeneratePoint(f"point {point} cannot be projected by the {k.model} model")
    return uv


def rays(uv: np.ndarray, k: Intrinsics):
    """Back-projected rays scaled to unit z. Returns ``(rays, valid)``."""
    uv = np.asarray(uv, dtype=float)
    mx = (uv[..., 0] - k.cx) / k.f
    my = (uv[..., 1] - k.cy) / k.f
    out = np.ones(uv.shape[:-1] + (3,))
    if k.model == PINHOLE or k.alpha == 0.0:
        out[..., 0] = mx
        out[..., 1] = my
        return out, np.ones(uv.shape[:-1], dtype=bool)
    a = k.alpha
    r2 = mx * mx + my * my
    S = np.sqrt(1.0 + (1.0 - a * a) * r2)
    eta = (a + S) / (r2 + 1.0)
    zs = eta - a
    valid = zs > 0
    g = eta / np.where(valid, zs, 1.0)
    valid &= g * np.sqrt(r2) < _TAN_MAX_THETA
    out[..., 0] = g * mx
    out[..., 1] = g * my
    return out, valid


def unproject_points(uv: np.ndarray, inv_depth: np.ndarray, k: Intrinsics):
    """Points at z-depth ``1 / inv_depth`` along each pixel ray. Returns ``(X, valid)``."""
    b, valid = rays(uv, k)
    inv_depth = np.asarray(inv_depth, dtype=float)
    valid = valid & (inv_depth > 0)
    safe = np.where(valid, inv_depth, 1.0)
    return b / safe[..., None], valid


def unproject(pixel, inv_depth, k: Intrinsics) -> np.ndarray:
    if np.any(np.asarray(inv_depth) <= 0):
        raise InvalidDepth("inverse depth must be positive")
    X, valid = unproject_points(np.asarray(pixel, dtype=float), inv_depth, k)
    if not np.all(valid):
        raise DegeneratePoint(f"pixel {pixel} lies outside the {k.model} model's domain")
    return X


def projection_jacobians(X: np.ndarray, k: Intrinsics):
    """Derivatives of the projection w.r.t. the point (..., 2, 3) and the raw
    intrinsics ``(f)`` or ``(f, alpha)`` (..., 2, num_params)."""
    X = np.asarray(X, dtype=float)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    den, norm = _denominator(X, k)
    den = np.where(np.abs(den) > 0, den, 1.0)
    J = np.zeros(X.shape[:-1] + (2, 3))
    # d(den)/dX = e_z + alpha * X / |X|
    dden = np.zeros(X.shape)
    dden[..., 2] = 1.0
    if k.model == UNIFIED and k.alpha != 0.0:
        dden = dden + k.alpha * X / np.where(norm > 0, norm, 1.0)[..., None]
    inv = 1.0 / den
    inv2 = inv * inv
    J[..., 0, :] = -k.f * (x * inv2)[..., None] * dden
    J[..., 1, :] = -k.f * (y * inv2)[..., None] * dden
    J[..., 0, 0] += k.f * inv
    J[..., 1, 1] += k.f * inv
    Jk = np.zeros(X.shape[:-1] + (2, k.num_params))
    Jk[..., 0, 0] = x * inv
    Jk[..., 1, 0] = y * inv
    if k.model == UNIFIED:
        n = norm if norm is not None else np.linalg.norm(X, axis=-1)
        Jk[..., 0, 1] = -k.f * x * n * inv2
        Jk[..., 1, 1] = -k.f * y * n * inv2
    return J, Jk


def ray_jacobian(uv: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Derivative of :func:`rays` w.r.t. the raw intrinsics, shape (..., 3, num_params)."""
    uv = np.asarray(uv, dtype=float)
    mx = (uv[..., 0] - k.cx) / k.f
    my = (uv[..., 1] - k.cy) / k.f
    out = np.zeros(uv.shape[:-1] + (3, k.num_params))
    if k.model == PINHOLE:
        out[..., 0, 0] = -mx / k.f
        out[..., 1, 0] = -my / k.f
        return out
    a = k.alpha
    r2 = mx * mx + my * my
    S = np.sqrt(1.0 + (1.0 - a * a) * r2)
    eta = (a + S) / (r2 + 1.0)
    zs = eta - a
    zs = np.where(np.abs(zs) > 0, zs, 1.0)
    g = eta / zs
    dg_deta = -a / (zs * zs)
    deta_dr2 = ((1.0 - a * a) / (2.0 * S) * (r2 + 1.0) - (a + S)) / (r2 + 1.0) ** 2
    dg_df = dg_deta * deta_dr2 * (-2.0 * r2 / k.f)
    out[..., 0, 0] = dg_df * mx - g * mx / k.f
    out[..., 1, 0] = dg_df * my - g * my / k.f
    deta_da = (1.0 - a * r2 / S) / (r2 + 1.0)
    dg_da = dg_deta * deta_da + eta / (zs * zs)
    out[..., 0, 1] = dg_da * mx
    out[..., 1, 1] = dg_da * my
    return out


def q_of_theta(theta, alpha: float):
    """Radial mapping q(theta) of the unified model (tan(theta) for alpha = 0)."""
    t = np.tan(theta)
    return t / (1.0 + alpha * np.sqrt(t * t + 1.0))


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(height, width, 2) array of integer pixel coordinates (x, y)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([xs, ys], axis=-1)


def rectify_unified_to_pinhole(shape, k_source: Intrinsics, k_target: Intrinsics):
    """Resampling map from a target (pinhole) image grid into a source image.

    Returns ``(map_xy, valid)`` where ``map_xy[v, u]`` is the source pixel that
    target pixel ``(u, v)`` should read from.
    """
    height, width = shape
    grid = pixel_grid(width, height)
    b, ok = rays(grid, k_target)
    src, ok2 = project_points(b, k_source)
    valid = ok & ok2
    valid &= (src[..., 0] >= 0) & (src[..., 0] <= k_source.width - 1)
    valid &= (src[..., 1] >= 0) & (src[..., 1] <= k_source.height - 1)
    return src, valid


def remap(image: np.ndarray, map_xy: np.ndarray, valid: np.ndarray | None = None, fill: float = np.nan) -> np.ndarray:
    """Bilinear lookup of ``image`` at ``map_xy``; invalid targets get ``fill``."""
    coords = np.stack([map_xy[..., 1], map_xy[..., 0]])
    out = ndimage.map_coordinates(np.asarray(image, dtype=float), coords, order=1, mode="nearest")
    if valid is not None:
        out = np.where(valid, out, fill)
    return out


# --------------------------------------------------------------------------
# 360 cube rig
# --------------------------------------------------------------------------

FACE_NAMES = ("front", "back", "left", "right", "up", "down")


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


_FACE_ROTATIONS = {
    "front": np.eye(3),
    "back": _rot_y(math.pi),
    "left": _rot_y(-math.pi / 2),
    "right": _rot_y(math.pi / 2),
    "up": _rot_x(math.pi / 2),  # camera y points down, so "up" looks along -y
    "down": _rot_x(-math.pi / 2),
}


@dataclass(frozen=True)
class CubeRig:
    """Six 90-degree pinhole faces sharing one optical centre.

    ``faces`` holds camera-to-rig transforms in :data:`FACE_NAMES` order.
    """

    faces: tuple
    face_intrinsics: Intrinsics

    @classmethod
    def build(cls, face_size: int) -> "CubeRig":
        faces = tuple(Pose.from_rt(_FACE_ROTATIONS[n], np.zeros(3)) for n in FACE_NAMES)
        k = Intrinsics.pinhole(face_size / 2.0, face_size, face_size)
        return cls(faces, k)

    def face(self, name: str) -> Pose:
        return self.faces[FACE_NAMES.index(name)]

    def extrinsics(self) -> list[Pose]:
        return list(self.faces)


def direction_to_erp(d: np.ndarray, erp_width: int, erp_height: int) -> np.ndarray:
    """Equirectangular pixel of a (..., 3) direction (longitude about +y, y down)."""
    d = np.asarray(d, dtype=float)
    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1] / np.linalg.norm(d, axis=-1), -1.0, 1.0))
    u = (lon + math.pi) / (2 * math.pi) * erp_width - 0.5
    v = (lat + math.pi / 2) / math.pi * erp_height - 0.5
    return np.stack([u, v], axis=-1)


def erp_to_direction(uv: np.ndarray, erp_width: int, erp_height: int) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    lon = (uv[..., 0] + 0.5) / erp_width * 2 * math.pi - math.pi
    lat = (uv[..., 1] + 0.5) / erp_height * math.pi - math.pi / 2
    return np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], axis=-1)


def cube_face_map(rig: CubeRig, face: str, erp_width: int, erp_height: int) -> np.ndarray:
    """ERP sampling coordinates (S, S, 2) for one cube face."""
    k = rig.face_intrinsics
    grid = pixel_grid(int(k.width), int(k.height))
    b, _ = rays(grid, k)
    d = b @ rig.face(face).R.T
    return direction_to_erp(d, erp_width, erp_height)


def erp_to_cube(erp: np.ndarray, rig: CubeRig) -> dict[str, np.ndarray]:
    """Resample an equirectangular image into the six cube faces."""
    h, w = erp.shape[:2]
    out = {}
    for name in FACE_NAMES:
        m = cube_face_map(rig, name, w, h)
        # wrap longitude so bilinear lookups across the seam stay inside the image
        coords = np.stack([m[..., 1], np.mod(m[..., 0], w)])
        out[name] = ndimage.map_coordinates(np.asarray(erp, dtype=float), coords, order=1, mode="grid-wrap")
    return out
