"""High-resolution metric depth from BA depth and affine-invariant video depth.

The optimised keyframe depths are fused into a sparse inverse-depth map per
frame; a per-frame affine map in inverse depth aligns the video depth to it,
smoothed over time with momentum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateFit, EmptyGraph
from .geometry import Intrinsics, Pose, pixel_grid, project_points, unproject_points
from .residuals import LOWRES_FACTOR

TAU_PX = 2.0
TAU_REL = 0.05
TAU_LO = 0.005
TAU_HI = 0.2
MOMENTUM = 0.9


@dataclass
class SparseDepthMap:
    values: np.ndarray  # inverse depth, 0 where invalid
    valid: np.ndarray

    @property
    def coverage(self) -> float:
        return float(self.valid.sum()) / self.valid.size

    @classmethod
    def from_dense(cls, inv_depth: np.ndarray) -> "SparseDepthMap":
        inv = np.asarray(inv_depth, dtype=float)
        valid = np.isfinite(inv) & (inv > 0)
        return cls(np.where(valid, inv, 0.0), valid)


@dataclass(frozen=True)
class AffineState:
    alpha: float
    beta: float
    momentum: float = MOMENTUM


@dataclass(frozen=True)
class AffineFit:
    alpha: float
    beta: float
    degenerate: bool = False


def _keyframe_points(graph, i):
    kf = graph.keyframes[i]
    d = kf.inv_depth
    h, w = d.shape
    k = graph.intrinsics.scaled(LOWRES_FACTOR)
    X, valid = unproject_points(pixel_grid(w, h).reshape(-1, 2), d.reshape(-1), k)
    P = graph.view_pose(i).act(X)
    return P, valid


def _verified(graph, P, j, tau_px, tau_rel):
    """Which world points land within ``tau_px`` of a pixel of keyframe j with matching depth."""
    kj = graph.keyframes[j]
    d = kj.inv_depth
    h, w = d.shape
    k = graph.intrinsics.scaled(LOWRES_FACTOR)
    Xj = graph.view_pose(j).inverse().act(P)
    uv, ok = project_points(Xj, k)
    ok &= np.all(np.isfinite(uv), axis=1) & (Xj[:, 2] > 0)
    ok &= (uv[:, 0] > -tau_px) & (uv[:, 0] < w - 1 + tau_px) & (uv[:, 1] > -tau_px) & (uv[:, 1] < h - 1 + tau_px)
    z = Xj[:, 2]
    out = np.zeros(len(P), dtype=bool)
    r = int(math.ceil(tau_px))
    base = np.floor(np.where(ok[:, None], uv, 0.0)).astype(int)
    for dy in range(-r, r + 2):
        for dx in range(-r, r + 2):
            qx, qy = base[:, 0] + dx, base[:, 1] + dy
            near = ok & (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
            near &= (uv[:, 0] - qx) ** 2 + (uv[:, 1] - qy) ** 2 <= tau_px * tau_px
            if not np.any(near):
                continue
            dq = d[qy[near], qx[near]]
            match = (dq > 0) & (np.abs(z[near] * dq - 1.0) <= tau_rel)
            idx = np.nonzero(near)[0]
            out[idx[match]] = True
    return out


def consistent_points(graph, tau_px: float = TAU_PX, tau_rel: float = TAU_REL, keyframes=None) -> np.ndarray:
    """World points of keyframe depths that pass the cross-keyframe check.

    A pixel is kept only if another keyframe sees a pixel within ``tau_px``
    (grid pixels) of its reprojection whose depth agrees within ``tau_rel``.
    With a single keyframe nothing can be cross-checked and all points are
    kept.
    """
    ids = [i for i, kf in enumerate(graph.keyframes) if kf.inv_depth is not None]
    if keyframes is not None:
        wanted = set(keyframes)
        ids = [i for i in ids if i in wanted]
    if not ids:
        raise EmptyGraph("no keyframe carries depth")
    out = []
    for i in ids:
        P, valid = _keyframe_points(graph, i)
        if len(ids) > 1:
            ver = np.zeros(len(P), dtype=bool)
            for j in ids:
                if j != i:
                    ver |= _verified(graph, P, j, tau_px, tau_rel)
            valid &= ver
        out.append(P[valid])
    return np.concatenate(out, axis=0)


def splat_points(points: np.ndarray, pose: Pose, k: Intrinsics) -> SparseDepthMap:
    """Nearest-pixel projection of world points with a z-buffer (closest wins)."""
    H, W = math.ceil(k.height), math.ceil(k.width)
    zbuf = np.full(H * W, np.inf)
    Xc = pose.inverse().act(points)
    uv, ok = project_points(Xc, k)
    px = np.rint(np.where(ok[:, None], uv, -1.0)).astype(int)
    ok &= (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H) & (Xc[:, 2] > 0)
    np.minimum.at(zbuf, px[ok, 1] * W + px[ok, 0], Xc[ok, 2])
    valid = np.isfinite(zbuf)
    values = np.where(valid, 1.0 / np.where(valid, zbuf, 1.0), 0.0)
    return SparseDepthMap(values.reshape(H, W), valid.reshape(H, W))


def aggregate_ba_depth(
    graph,
    pose: Pose,
    intrinsics: Intrinsics | None = None,
    tau_px: float = TAU_PX,
    tau_rel: float = TAU_REL,
    keyframes=None,
) -> SparseDepthMap:
    """Sparse full-resolution inverse depth of the frame at ``pose``.

    Keyframe depths are filtered by :func:`consistent_points` and splatted
    into the target camera (full-resolution ``intrinsics``, default the
    graph's).
    """
    k = graph.intrinsics if intrinsics is None else intrinsics
    return splat_points(consistent_points(graph, tau_px, tau_rel, keyframes), pose, k)


def fit_affine(D_vda: np.ndarray, sparse: SparseDepthMap, mask: np.ndarray | None = None, strict: bool = False) -> AffineFit:
    """Least-squares ``(alpha, beta)`` with ``alpha / D_vda + beta ~ sparse inverse depth``.

    Uses only valid sparse pixels inside the static mask. A rank-deficient
    system or a non-positive scale gives ``(1, 0)`` flagged degenerate, or
    raises :class:`DegenerateFit` when ``strict``.
    """
    D = np.asarray(D_vda, dtype=float)
    use = sparse.valid & np.isfinite(D) & (D > 0)
    if mask is not None:
        use &= np.asarray(mask) > 0
    x = 1.0 / D[use]
    y = sparse.values[use]
    n = len(x)
    A = np.array([[x @ x, x.sum()], [x.sum(), float(n)]])
    b = np.array([x @ y, y.sum()])
    det = A[0, 0] * A[1, 1] - A[0, 1] ** 2
    scale = max(A[0, 0] * A[1, 1], 1e-300)
    if n < 2 or det <= 1e-12 * scale:
        if strict:
            raise DegenerateFit(f"affine fit is rank deficient ({n} pixels)")
        return AffineFit(1.0, 0.0, True)
    alpha = (A[1, 1] * b[0] - A[0, 1] * b[1]) / det
    beta = (A[0, 0] * b[1] - A[0, 1] * b[0]) / det
    if not alpha > 0:
        if strict:
            raise DegenerateFit("fitted scale is not positive")
        return AffineFit(1.0, 0.0, True)
    return AffineFit(float(alpha), float(beta))


def affine_objective(alpha: float, beta: float, D_vda: np.ndarray, sparse: SparseDepthMap, mask=None) -> float:
    D = np.asarray(D_vda, dtype=float)
    use = sparse.valid & np.isfinite(D) & (D > 0)
    if mask is not None:
        use &= np.asarray(mask) > 0
    r = alpha / D[use] + beta - sparse.values[use]
    return float(r @ r)


def affine_residual_jacobian(D_vda: np.ndarray) -> np.ndarray:
    """d(alpha / D + beta - y) / d(alpha, beta), shape (..., 2)."""
    D = np.asarray(D_vda, dtype=float)
    return np.stack([1.0 / D, np.ones_like(D)], axis=-1)


def hd_depth_jacobian(D_vda: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """d(1 / (alpha / D + beta)) / d(alpha, beta), shape (..., 2)."""
    D = np.asarray(D_vda, dtype=float)
    den = alpha / D + beta
    return np.stack([-(1.0 / D) / den**2, -1.0 / den**2], axis=-1)


def momentum_update(state: AffineState | None, alpha: float, beta: float, momentum: float = MOMENTUM) -> AffineState:
    """Exponential moving average of the affine parameters; the first call initialises."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if state is None:
        return AffineState(float(alpha), float(beta), momentum)
    m = state.momentum
    return AffineState(m * state.alpha + (1 - m) * alpha, m * state.beta + (1 - m) * beta, m)


def compose_hd_depth(D_vda: np.ndarray, state: AffineState):
    """Metric depth ``1 / (alpha / D_vda + beta)``; returns ``(depth, valid)`` with NaN where invalid."""
    D = np.asarray(D_vda, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        den = state.alpha / D + state.beta
    valid = np.isfinite(den) & (den > 0) & np.isfinite(D) & (D > 0)
    out = np.full(D.shape, np.nan)
    out[valid] = 1.0 / den[valid]
    return out, valid


Infiller = Callable[[SparseDepthMap, int], SparseDepthMap]


def identity_infiller(sparse: SparseDepthMap, frame: int) -> SparseDepthMap:
    return sparse


@dataclass
class GateResult:
    target: SparseDepthMap
    action: str  # "sparse", "infill" or "prior"


def coverage_gate(
    sparse: SparseDepthMap,
    prior_inv_depth: Optional[np.ndarray],
    infiller: Infiller = identity_infiller,
    frame: int = 0,
    tau_lo: float = TAU_LO,
    tau_hi: float = TAU_HI,
) -> GateResult:
    """Choose the alignment target by sparse coverage.

    ``>= tau_hi``: the sparse map itself; between the thresholds: the
    infiller's output; below ``tau_lo``: the frame's metric depth prior.
    """
    c = sparse.coverage
    if c >= tau_hi:
        return GateResult(sparse, "sparse")
    if c >= tau_lo:
        return GateResult(infiller(sparse, frame), "infill")
    if prior_inv_depth is None:
        return GateResult(sparse, "sparse")
    return GateResult(SparseDepthMap.from_dense(prior_inv_depth), "prior")


@dataclass
class FrameDepth:
    frame: int
    depth: np.ndarray
    valid: np.ndarray
    fit: AffineFit
    state: AffineState
    action: str


def align_sequence(
    frames,
    targets,
    video_depths,
    masks=None,
    momentum: float = MOMENTUM,
) -> list[FrameDepth]:
    """Sequential momentum pass over per-frame alignment targets."""
    state = None
    out = []
    for n, frame in enumerate(frames):
        gate = targets[n]
        mask = None if masks is None else masks[n]
        fit = fit_affine(video_depths[n], gate.target, mask)
        if fit.degenerate and state is not None:
            a, b = state.alpha, state.beta
        else:
            a, b = fit.alpha, fit.beta
        state = momentum_update(state, a, b, momentum)
        depth, valid = compose_hd_depth(video_depths[n], state)
        out.append(FrameDepth(frame, depth, valid, fit, state, gate.action))
    return out
