"""Synthetic scenes with exact depth, flow, tracks and masks.

A scene is a set of textured rectangles plus optional moving boxes, seen by
a camera following a smooth trajectory. Every output is computed by exact ray
casting, so flows and tracks are consistent with the rendered depth and the
ground-truth poses to floating-point precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, pixel_grid, project_points, rays, so3_exp
from .residuals import FlowField, TrackSet

OCCLUSION_TOL = 1e-6
DEFAULT_WIDTH, DEFAULT_HEIGHT = 256, 192


@dataclass(frozen=True)
class Plane:
    """Rectangle ``origin + a*u_axis + b*v_axis`` with ``a, b`` inside ``extent``."""

    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    extent: tuple  # (a_min, a_max, b_min, b_max)
    texture_seed: int = 0

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u_axis, self.v_axis)
        return n / np.linalg.norm(n)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Ray parameter ``t`` (inf on miss) and local coordinates of each hit."""
        n = self.normal
        den = dirs @ n
        num = (self.origin - origins) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(den) > 1e-15, num / den, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        hit = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        rel = hit - self.origin
        a = rel @ self.u_axis / (self.u_axis @ self.u_axis)
        b = rel @ self.v_axis / (self.v_axis @ self.v_axis)
        a0, a1, b0, b1 = self.extent
        inside = (a >= a0) & (a <= a1) & (b >= b0) & (b <= b1)
        return np.where(inside, t, np.inf), a, b


@dataclass(frozen=True)
class MovingBox:
    """Axis-aligned box translating linearly: ``center(i) = center0 + i * velocity``."""

    center0: np.ndarray
    half_size: np.ndarray
    velocity: np.ndarray

    def center(self, frame: float) -> np.ndarray:
        return self.center0 + frame * self.velocity

    def intersect(self, origins, dirs, frame):
        c = self.center(frame)
        lo, hi = c - self.half_size, c + self.half_size
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origins) * inv
            t2 = (hi - origins) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        ok = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(ok, t, np.inf)


@dataclass
class Scene:
    planes: list
    poses: list  # camera-to-world, one per frame
    intrinsics: Intrinsics
    dynamic: list = field(default_factory=list)
    seed: int = 0

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def path_length(self) -> float:
        p = np.array([T.t for T in self.poses])
        return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))

    def reversed(self) -> "Scene":
        """Same scene played backwards (dynamic objects reverse their motion)."""
        n = self.num_frames - 1
        dyn = [MovingBox(b.center(n), b.half_size, -b.velocity) for b in self.dynamic]
        return Scene(self.planes, self.poses[::-1], self.intrinsics, dyn, self.seed)

    def camera_pose(self, frame: int, view: Pose | None = None) -> Pose:
        T = self.poses[frame]
        return T if view is None else T @ view


# --------------------------------------------------------------------------
# Scene construction
# --------------------------------------------------------------------------


def default_intrinsics(width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> Intrinsics:
    """Pinhole camera with a 60 degree horizontal field of view."""
    return Intrinsics.pinhole((width / 2.0) / math.tan(math.radians(30.0)), width, height)


def open_box(depth: float = 6.0, half_width: float = 3.0, half_height: float = 30.0) -> list:
    """Back wall plus left and right walls; tall enough to fill the view."""
    X, Y, Z = np.eye(3)
    back = Plane(np.array([0.0, 0.0, depth]), X, Y, (-half_width, half_width, -half_height, half_height), 1)
    left = Plane(np.array([-half_width, 0.0, 0.0]), Z, Y, (-40.0, depth, -half_height, half_height), 2)
    right = Plane(np.array([half_width, 0.0, 0.0]), Y, Z, (-half_height, half_height, -40.0, depth), 3)
    return [back, left, right]


def closed_room(half: float = 4.0) -> list:
    """Six inward-facing walls of a cube, for omnidirectional rigs."""
    X, Y, Z = np.eye(3)
    e = (-half, half, -half, half)
    return [
        Plane(np.array([0.0, 0.0, half]), X, Y, e, 1),
        Plane(np.array([0.0, 0.0, -half]), Y, X, e, 2),
        Plane(np.array([-half, 0.0, 0.0]), Z, Y, e, 3),
        Plane(np.array([half, 0.0, 0.0]), Y, Z, e, 4),
        Plane(np.array([0.0, -half, 0.0]), X, Z, e, 5),
        Plane(np.array([0.0, half, 0.0]), Z, X, e, 6),
    ]


def sinusoidal_trajectory(
    num_frames: int,
    seed: int = 0,
    amplitude: float = 1.2,
    yaw: float = 0.25,
    palindromic: bool = False,
) -> list:
    """Smooth camera path: a sideways sweep with sinusoidal wobble and a turning heading.

    The camera crosses from ``x = -amplitude`` to ``x = +amplitude`` while
    turning by ``2 * yaw`` radians towards the direction of travel, so the
    image keeps moving at a steady rate. With ``palindromic`` the camera goes
    out and comes back along the same path, so the sequence reads the same
    forwards and backwards.
    """
    rng = np.random.default_rng(seed)
    amp = amplitude * (1.0 + 0.1 * rng.uniform(-1, 1, size=3))
    phase = 2.0 * math.pi * rng.uniform(0, 1, size=4)
    yaw_amp = yaw * (1.0 + 0.1 * rng.uniform(-1, 1))
    poses = []
    for i in range(num_frames):
        s = i / max(num_frames - 1, 1)
        if palindromic:
            s = 1.0 - abs(1.0 - 2.0 * s)
        x = amp[0] * (2.0 * s - 1.0 + 0.08 * math.sin(4 * math.pi * s + phase[0]))
        y = 0.1 * amp[1] * math.sin(2 * math.pi * s + phase[1])
        z = 0.3 * amp[2] * math.sin(2 * math.pi * s + phase[2])
        heading = yaw_amp * (2.0 * s - 1.0) + 0.03 * math.sin(2 * math.pi * s + phase[3])
        w = np.array([0.03 * math.sin(4 * math.pi * s + phase[1]), heading, 0.0])
        poses.append(Pose.from_rt(so3_exp(w), [x, y, z]))
    return poses


def make_scene(
    num_frames: int = 100,
    seed: int = 0,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    dynamic: bool = False,
    palindromic: bool = False,
    amplitude: float = 1.2,
    yaw: float = 0.25,
) -> Scene:
    """Default scene: open box, sinusoidal path, optional moving box.

    The moving box sits between the camera and the back wall and covers
    roughly 30% of each frame while sliding opposite to the camera.
    """
    k = default_intrinsics(width, height)
    poses = sinusoidal_trajectory(num_frames, seed, amplitude, yaw, palindromic)
    boxes = []
    if dynamic:
        # box covers ~30% of the pixels averaged over the default sweep
        span = 2 * 3.2 * math.tan(math.radians(30.0))
        half = np.array([0.5 * span * 0.605, 0.5 * span * 0.605 * height / width, 0.3])
        boxes.append(MovingBox(np.array([0.0, 0.0, 3.5]), half, np.array([-0.5 / max(num_frames, 1), 0.0, 0.0])))
    return Scene(open_box(), poses, k, boxes, seed)


# --------------------------------------------------------------------------
# Ray casting
# --------------------------------------------------------------------------


def cast(scene: Scene, frame: float, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit along each ray.

    Returns ``(t, surface)`` where ``surface`` is the plane index, or
    ``-1 - b`` for dynamic box ``b``, or ``len(planes)`` on a miss.
    """
    shape = dirs.shape[:-1]
    t_best = np.full(shape, np.inf)
    surf = np.full(shape, len(scene.planes), dtype=int)
    for n, pl in enumerate(scene.planes):
        t, _, _ = pl.intersect(origins, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        surf = np.where(closer, n, surf)
    for b, box in enumerate(scene.dynamic):
        t = box.intersect(origins, dirs, frame)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        surf = np.where(closer, -1 - b, surf)
    return t_best, surf


def _camera_rays(pose: Pose, uv: np.ndarray, k: Intrinsics):
    b, ok = rays(uv, k)
    dirs = b @ pose.R.T
    origins = np.broadcast_to(pose.t, dirs.shape)
    return origins, dirs, ok


def _grid(k: Intrinsics):
    w, h = math.ceil(k.width), math.ceil(k.height)
    return pixel_grid(w, h), (h, w)


def render_depth(scene: Scene, frame: int, k: Intrinsics | None = None, view: Pose | None = None):
    """Inverse z-depth on the pixel grid of ``k`` and the static mask.

    Pixels whose ray escapes the scene get inverse depth 0; the mask is 0 on
    dynamic-object pixels and 1 elsewhere.
    """
    k = scene.intrinsics if k is None else k
    uv, shape = _grid(k)
    pose = scene.camera_pose(frame, view)
    origins, dirs, ok = _camera_rays(pose, uv, k)
    t, surf = cast(scene, frame, origins, dirs)
    hit = ok & np.isfinite(t)
    inv = np.where(hit, 1.0 / np.where(hit, t, 1.0), 0.0)
    mask = np.where(hit & (surf < 0), 0, 1).astype(np.uint8)
    return inv.reshape(shape), mask.reshape(shape)


def _world_points(scene, frame, k, view, uv):
    pose = scene.camera_pose(frame, view)
    origins, dirs, ok = _camera_rays(pose, uv, k)
    t, surf = cast(scene, frame, origins, dirs)
    hit = ok & np.isfinite(t)
    P = origins + np.where(hit, t, 0.0)[..., None] * dirs
    return P, hit, surf


def _move_to(scene, P, surf, frame_i, frame_j):
    """World positions at ``frame_j`` of surface points observed at ``frame_i``."""
    P = P.copy()
    for b, box in enumerate(scene.dynamic):
        sel = surf == -1 - b
        P[sel] += box.center(frame_j) - box.center(frame_i)
    return P


def _observe(scene, P, frame, k, view):
    """Project world points into a frame; visible when not occluded and in bounds."""
    pose = scene.camera_pose(frame, view)
    Xc = pose.inverse().act(P)
    uv, ok = project_points(Xc, k)
    ok &= (uv[..., 0] >= 0) & (uv[..., 0] < k.width) & (uv[..., 1] >= 0) & (uv[..., 1] < k.height)
    origins, dirs, rok = _camera_rays(pose, uv, k)
    t, _ = cast(scene, frame, origins, dirs)
    # rays have unit z in the camera, so t is a z-depth
    ok &= rok & (t >= Xc[..., 2] * (1.0 - OCCLUSION_TOL))
    return uv, ok


def induced_flow(
    scene: Scene,
    frame_i: int,
    frame_j: int,
    k: Intrinsics | None = None,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    view_i: Pose | None = None,
    view_j: Pose | None = None,
) -> FlowField:
    """Exact flow from frame i to frame j on the pixel grid of ``k``.

    Weights are 1 where the surface point is visible in frame j and 0 on
    occluded, out-of-bounds or empty pixels. Dynamic pixels carry the flow of
    the moving object. ``noise`` adds isotropic Gaussian noise (pixels of
    ``k``) to every flow vector.
    """
    k = scene.intrinsics if k is None else k
    uv, shape = _grid(k)
    P, hit, surf = _world_points(scene, frame_i, k, view_i, uv)
    P = _move_to(scene, P, surf, frame_i, frame_j)
    uv_j, vis = _observe(scene, P, frame_j, k, view_j)
    ok = hit & vis
    flow = np.where(ok[..., None], uv_j - uv, 0.0)
    if noise > 0:
        rng = np.random.default_rng() if rng is None else rng
        flow = flow + rng.normal(0.0, noise, size=flow.shape)
    return FlowField(flow.reshape(shape + (2,)), ok.astype(float).reshape(shape))


def sample_tracks(
    scene: Scene,
    pairs,
    count: int,
    noise: float = 0.0,
    seed=0,
    k: Intrinsics | None = None,
    include_dynamic: bool = False,
    on_grid: int | None = None,
    view_i: Pose | None = None,
    view_j: Pose | None = None,
) -> TrackSet:
    """Random visible surface points matched between each ``(i, j)`` pair.

    Points are drawn uniformly over frame i (or on the pixel lattice of
    spacing ``on_grid``), projected into frame j, and perturbed by Gaussian
    ``noise`` in both frames. Each pair uses its own generator derived from
    ``(seed, i, j)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    k = scene.intrinsics if k is None else k
    out = []
    for i, j in pairs:
        rng = np.random.default_rng([int(v) for v in np.atleast_1d(seed)] + [i, j])
        n = 4 * count
        if on_grid:
            gw, gh = math.ceil(k.width / on_grid), math.ceil(k.height / on_grid)
            uv = np.stack([rng.integers(0, gw, n), rng.integers(0, gh, n)], axis=1).astype(float) * on_grid
        else:
            uv = rng.uniform([0.0, 0.0], [k.width, k.height], size=(n, 2))
        P, hit, surf = _world_points(scene, i, k, view_i, uv)
        if not include_dynamic:
            hit &= surf >= 0
        P = _move_to(scene, P, surf, i, j)
        uv_j, vis = _observe(scene, P, j, k, view_j)
        ok = hit & vis
        p_i, p_j = uv[ok][:count], uv_j[ok][:count]
        if noise > 0:
            p_i = p_i + rng.normal(0.0, noise, size=p_i.shape)
            p_j = p_j + rng.normal(0.0, noise, size=p_j.shape)
            inside = np.all((p_i >= 0) & (p_i < [k.width, k.height]) & (p_j >= 0) & (p_j < [k.width, k.height]), axis=1)
            p_i, p_j = p_i[inside], p_j[inside]
        m = len(p_i)
        out.append(TrackSet(np.full(m, i), p_i, np.full(m, j), p_j, np.ones(m)))
    return TrackSet.concatenate(out)


def _texture(a, b, seed):
    rng = np.random.default_rng(1000 + seed)
    fa, fb = rng.uniform(1.5, 4.0, size=2)
    checker = (np.floor(a * fa) + np.floor(b * fb)) % 2
    ph = rng.uniform(0, 2 * np.pi, size=2)
    return 0.25 + 0.5 * checker + 0.1 * np.sin(7.3 * a + ph[0]) * np.sin(5.1 * b + ph[1])


def render_image(scene: Scene, frame: int, k: Intrinsics | None = None, view: Pose | None = None) -> np.ndarray:
    """Grayscale rendering in [0, 1] with checker textures, for tracker tests."""
    k = scene.intrinsics if k is None else k
    uv, shape = _grid(k)
    P, hit, surf = _world_points(scene, frame, k, view, uv)
    img = np.zeros(surf.shape)
    for n, pl in enumerate(scene.planes):
        sel = hit & (surf == n)
        rel = P[sel] - pl.origin
        img[sel] = _texture(rel @ pl.u_axis, rel @ pl.v_axis, pl.texture_seed)
    for b, box in enumerate(scene.dynamic):
        sel = hit & (surf == -1 - b)
        rel = P[sel] - box.center(frame)
        img[sel] = 0.9 - 0.6 * ((np.floor(rel[:, 0] * 6) + np.floor(rel[:, 1] * 6) + np.floor(rel[:, 2] * 6)) % 2)
    return img.reshape(shape)


def depth_prior(scene: Scene, frame: int, k_assumed: Intrinsics, scale: int = 1, view: Pose | None = None):
    """Metric-depth-network stand-in: exact inverse depth scaled by ``f_true / f_assumed``.

    Returned on the grid of the true camera divided by ``scale``, with an
    all-ones uncertainty map.
    """
    k = scene.intrinsics.scaled(scale) if scale != 1 else scene.intrinsics
    inv, _ = render_depth(scene, frame, k, view)
    inv = inv * (scene.intrinsics.f / k_assumed.f)
    return inv, np.ones_like(inv)


def video_depth(scene: Scene, frame: int, scale: float = 2.0, shift: float = 0.3, view: Pose | None = None) -> np.ndarray:
    """Affine-invariant video-depth stand-in at full resolution.

    ``1 / D = scale / D_true + shift``; pixels without geometry are NaN.
    """
    inv, _ = render_depth(scene, frame, scene.intrinsics, view)
    out = np.full(inv.shape, np.nan)
    ok = inv > 0
    out[ok] = 1.0 / (scale * inv[ok] + shift)
    return out
