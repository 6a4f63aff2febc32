"""Trajectory, calibration and epipolar error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateTrajectory, NoValidPairs, NormalizationDegenerate, ZeroBaseline
from .geometry import PINHOLE, Intrinsics, Pose, hat


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("one timestamp per pose")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @classmethod
    def from_poses(cls, poses) -> "Trajectory":
        return cls(np.arange(len(poses), dtype=float), list(poses))

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions(), axis=0), axis=1).sum())

    def transformed(self, R: np.ndarray, t: np.ndarray, scale: float = 1.0) -> "Trajectory":
        """Apply ``x -> scale * R x + t`` to every pose (orientations rotate by R)."""
        out = [Pose.from_rt(R @ p.R, scale * (R @ p.t) + t) for p in self.poses]
        return Trajectory(self.timestamps.copy(), out)

    def scaled(self, s: float) -> "Trajectory":
        return Trajectory(self.timestamps.copy(), [Pose(p.q, s * p.t) for p in self.poses])

    def reversed_order(self) -> "Trajectory":
        """Poses in reverse order, re-stamped with the original timestamps."""
        return Trajectory(self.timestamps.copy(), self.poses[::-1])


@dataclass
class Alignment:
    aligned: Trajectory
    R: np.ndarray
    t: np.ndarray
    scale: float
    degenerate: bool


def umeyama_align(est: Trajectory, ref: Trajectory, with_scale: bool = False) -> Alignment:
    """Least-squares rigid (or similarity) transform taking est positions onto ref.

    Collinear reference positions leave the rotation about that line
    undetermined; the result is still returned with ``degenerate`` set.
    """
    if len(est) != len(ref):
        raise ValueError("trajectories must have equal length")
    if len(est) < 3:
        raise DegenerateTrajectory("alignment needs at least 3 poses")
    X = est.positions()
    Y = ref.positions()
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    n = len(X)
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = float((Xc * Xc).sum() / n)
    if with_scale:
        if var_x <= 0:
            raise DegenerateTrajectory("estimated positions have zero spread")
        s = float(np.trace(np.diag(D) @ S) / var_x)
    else:
        s = 1.0
    t = my - s * R @ mx
    sv = np.linalg.svd(Yc, compute_uv=False)
    sv_x = np.linalg.svd(Xc, compute_uv=False)
    degenerate = bool(sv[1] <= 1e-12 * max(sv[0], 1e-300) or sv_x[1] <= 1e-12 * max(sv_x[0], 1e-300))
    return Alignment(est.transformed(R, t, s), R, t, s, degenerate)


def _prepare(est, ref, align, with_scale):
    if align:
        return umeyama_align(est, ref, with_scale).aligned
    return est


def ate(est: Trajectory, ref: Trajectory, align: bool = True, with_scale: bool = False) -> float:
    """RMSE of position differences, after alignment unless ``align`` is False."""
    e = _prepare(est, ref, align, with_scale)
    d = e.positions() - ref.positions()
    return float(math.sqrt(np.mean(np.sum(d * d, axis=1))))


def _relative_errors(est, ref, delta):
    if delta < 1 or delta >= len(est):
        raise ValueError("delta must be in [1, len - 1]")
    trans, rot = [], []
    for i in range(len(est) - delta):
        E = est.poses[i].inverse() @ est.poses[i + delta]
        G = ref.poses[i].inverse() @ ref.poses[i + delta]
        err = G.inverse() @ E
        trans.append(np.linalg.norm(err.t))
        rot.append(err.rotation_angle())
    return np.array(trans), np.array(rot)


def _deltas(delta, deltas):
    return [delta] if deltas is None else list(deltas)


def rte(est: Trajectory, ref: Trajectory, delta: int = 1, align: bool = True, with_scale: bool = False, deltas=None) -> float:
    """RMSE of relative-translation discrepancies over pairs ``(i, i + delta)``.

    With ``deltas`` the RMSE is averaged over several gaps.
    """
    e = _prepare(est, ref, align, with_scale)
    vals = [math.sqrt(np.mean(_relative_errors(e, ref, d)[0] ** 2)) for d in _deltas(delta, deltas)]
    return float(np.mean(vals))


def rre(est: Trajectory, ref: Trajectory, delta: int = 1, align: bool = True, with_scale: bool = False, deltas=None) -> float:
    """RMSE of relative-rotation discrepancies in degrees."""
    e = _prepare(est, ref, align, with_scale)
    vals = [math.sqrt(np.mean(_relative_errors(e, ref, d)[1] ** 2)) for d in _deltas(delta, deltas)]
    return float(np.degrees(np.mean(vals)))


def fov_degrees(k: Intrinsics) -> float:
    return math.degrees(2.0 * math.atan(k.width / (2.0 * k.f)))


def focal_error(k_est: Intrinsics, k_gt: Intrinsics) -> float:
    """Absolute horizontal field-of-view difference in degrees."""
    if k_est.width != k_gt.width:
        raise ValueError("focal error needs equal image widths")
    return abs(fov_degrees(k_est) - fov_degrees(k_gt))


def fundamental_from_relative(T_rel: Pose, k: Intrinsics) -> np.ndarray:
    """``F = K^-T [t]x R K^-1`` for ``X_j = R X_i + t``; normalised to unit Frobenius norm.

    Satisfies ``y^T F x = 0`` for pixel ``x`` in frame i and ``y`` in frame j.
    """
    if k.model != PINHOLE:
        raise ValueError("fundamental matrix needs pinhole intrinsics")
    t = T_rel.t
    if np.linalg.norm(t) < 1e-12:
        raise ZeroBaseline("relative translation is zero")
    Kinv = np.linalg.inv(k.K())
    F = Kinv.T @ hat(t) @ T_rel.R @ Kinv
    return F / np.linalg.norm(F)


@dataclass
class SampsonResult:
    error: float
    skipped: int
    pairs: int


def sampson_terms(F: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Per-correspondence Sampson distances and a validity flag (non-zero denominator)."""
    xh = np.concatenate([np.asarray(x, float).reshape(-1, 2), np.ones((len(x), 1))], axis=1)
    yh = np.concatenate([np.asarray(y, float).reshape(-1, 2), np.ones((len(y), 1))], axis=1)
    Fx = xh @ F.T
    Fty = yh @ F
    num = np.abs(np.sum(yh * Fx, axis=1))
    den = np.sqrt(Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Fty[:, 0] ** 2 + Fty[:, 1] ** 2)
    ok = den > 1e-300 * max(np.abs(F).max(), 1e-300)
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0), ok


def sampson_error(traj: Trajectory, k: Intrinsics, correspondences) -> SampsonResult:
    """Mean Sampson distance of matches between consecutive frames.

    ``correspondences`` maps frame index ``i`` to ``(x, y)`` pixel arrays of
    matches between frames ``i`` and ``i + 1``. Each pair contributes the mean
    over its matches; the sum over pairs is divided by the number of frames.
    Matches at the epipole (zero denominator) are skipped and counted.
    """
    N = len(traj)
    total = 0.0
    skipped = 0
    used = 0
    for i in sorted(correspondences):
        if not (0 <= i < N - 1):
            continue
        x, y = correspondences[i]
        if len(x) == 0:
            continue
        T_rel = traj.poses[i + 1].inverse() @ traj.poses[i]
        F = fundamental_from_relative(T_rel, k)
        vals, ok = sampson_terms(F, x, y)
        skipped += int((~ok).sum())
        if not np.any(ok):
            continue
        total += float(vals[ok].mean())
        used += 1
    if used == 0:
        raise NoValidPairs("no frame pair has a usable correspondence")
    return SampsonResult(total / N, skipped, used)


@dataclass
class ShuttleResult:
    s_ate: float
    s_rte: float
    s_rre: float
    s_focal: float


def normalize_length(traj: Trajectory) -> Trajectory:
    L = traj.path_length()
    if not L > 1e-12:
        raise NormalizationDegenerate("trajectory has zero path length")
    return traj.scaled(1.0 / L)


def shuttle_metrics(forward: Trajectory, backward: Trajectory, k_forward: Intrinsics, k_backward: Intrinsics, delta: int = 1) -> ShuttleResult:
    """Compare two runs whose poses are already in the same (forward) frame order."""
    a = normalize_length(forward)
    b = normalize_length(backward)
    return ShuttleResult(
        ate(b, a),
        rte(b, a, delta, align=False),
        rre(b, a, delta, align=False),
        focal_error(k_forward, k_backward),
    )


def shuttle_eval(engine: Callable, video, delta: int = 1) -> ShuttleResult:
    """Run ``engine`` on a video and on its reversal and compare the results.

    ``engine(video)`` returns ``(Trajectory, Intrinsics)`` and ``video`` must
    provide ``reversed()``. The reversed run's poses are put back into forward
    order before comparison.
    """
    fwd, k_fwd = engine(video)
    rev, k_rev = engine(video.reversed())
    return shuttle_metrics(fwd, rev.reversed_order(), k_fwd, k_rev, delta)
