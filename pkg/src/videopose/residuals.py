"""Energy terms of the keyframe bundle adjustment and their linearisation.

All image-space quantities here live on the low-resolution BA grid (one
eighth of the input resolution). Pixel ``(x, y)`` of that grid is the point
``(8x, 8y)`` of the full image, so a full-resolution coordinate maps to the
grid by plain division and the grid camera is ``k.scaled(8)``.

Depth maps are inverse depths. The depth-prior term regularises in the same
parameterisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGraph
from .geometry import Intrinsics, Pose, pixel_grid, project_points, projection_jacobians, ray_jacobian, rays

LOWRES_FACTOR = 8
SPLAT_MIN_WEIGHT = 1e-3
DEPTH_MIN, DEPTH_MAX = 1e-4, 1e4


@dataclass
class FlowField:
    """Per-pixel flow (h, w, 2) in grid pixels plus confidence weights (h, w)."""

    flow: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.weight = np.asarray(self.weight, dtype=float)
        if self.flow.shape[:2] != self.weight.shape or self.flow.shape[-1] != 2:
            raise ValueError("flow must be (h, w, 2) with (h, w) weights")
        if not np.all(np.isfinite(self.weight)) or np.any(self.weight < 0):
            raise ValueError("flow weights must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(tuple(shape) + (2,)), np.zeros(shape))


@dataclass
class TrackSet:
    """Point correspondences ``p_i`` in frame ``i`` and ``p_j`` in frame ``j`` (full-res pixels)."""

    frame_i: np.ndarray
    p_i: np.ndarray
    frame_j: np.ndarray
    p_j: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.frame_i = np.asarray(self.frame_i, dtype=np.int64).reshape(-1)
        self.frame_j = np.asarray(self.frame_j, dtype=np.int64).reshape(-1)
        self.p_i = np.asarray(self.p_i, dtype=float).reshape(-1, 2)
        self.p_j = np.asarray(self.p_j, dtype=float).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        n = len(self.frame_i)
        if not all(len(a) == n for a in (self.frame_j, self.p_i, self.p_j, self.confidence)):
            raise ValueError("track arrays must have equal length")

    def __len__(self) -> int:
        return len(self.frame_i)

    @classmethod
    def empty(cls) -> "TrackSet":
        z = np.zeros(0)
        return cls(z, np.zeros((0, 2)), z, np.zeros((0, 2)), z)

    @classmethod
    def concatenate(cls, sets) -> "TrackSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.frame_i for s in sets]),
            np.concatenate([s.p_i for s in sets]),
            np.concatenate([s.frame_j for s in sets]),
            np.concatenate([s.p_j for s in sets]),
            np.concatenate([s.confidence for s in sets]),
        )

    def subset(self, mask) -> "TrackSet":
        return TrackSet(self.frame_i[mask], self.p_i[mask], self.frame_j[mask], self.p_j[mask], self.confidence[mask])

    def for_pair(self, i: int, j: int) -> "TrackSet":
        fwd = (self.frame_i == i) & (self.frame_j == j)
        out = self.subset(fwd)
        bwd = (self.frame_i == j) & (self.frame_j == i)
        if np.any(bwd):
            rev = TrackSet(self.frame_j[bwd], self.p_j[bwd], self.frame_i[bwd], self.p_i[bwd], self.confidence[bwd])
            out = TrackSet.concatenate([out, rev])
        return out


@dataclass
class ResidualBlock:
    """Residual values with their weights and Jacobians keyed by parameter name."""

    values: np.ndarray
    weights: np.ndarray
    jacobians: dict = field(default_factory=dict)

    def energy(self) -> float:
        r = self.values.reshape(self.weights.size, -1)
        return float(np.sum(self.weights.reshape(-1) * np.sum(r * r, axis=1)))


@dataclass(frozen=True)
class TermSwitches:
    dense: bool = True
    sparse: bool = True
    depth_reg: bool = True
    mask: bool = True


# --------------------------------------------------------------------------
# Single-edge operations
# --------------------------------------------------------------------------


def _in_bounds(uv: np.ndarray, width: float, height: float) -> np.ndarray:
    return (uv[..., 0] >= 0) & (uv[..., 0] < width) & (uv[..., 1] >= 0) & (uv[..., 1] < height)


def _edge_terms(Rs, ts, Rd, td, inv_depth, grid, B, dB, k: Intrinsics, target, weight, need_jac=True, inbounds=None):
    """Batched dense-flow residuals for M measurements sharing one pixel grid.

    Shapes: Rs/Rd (M,3,3), ts/td (M,3), inv_depth (M,P), grid (P,2), B (P,3),
    dB (P,3,nk), target (M,P,2), weight (M,P). Returns residuals (M,P,2), the
    effective weights and, when requested, Jacobians w.r.t. the source pose,
    destination pose (left twists on the world side), inverse depth and raw
    intrinsics. ``inbounds`` overrides the image-bounds test of the
    reprojections (used to hold the active pixel set fixed within a solver
    iteration); the mask actually used is returned last.
    """
    d = inv_depth
    dvalid = d > 0
    dsafe = np.where(dvalid, d, 1.0)
    Xs = B[None] / dsafe[..., None]
    Pw = np.matmul(Xs, Rs.transpose(0, 2, 1)) + ts[:, None, :]
    Xd = np.matmul(Pw - td[:, None, :], Rd)
    uv, pvalid = project_points(Xd, k)
    r = uv - grid[None] - target
    if inbounds is None:
        inbounds = _in_bounds(uv, k.width, k.height)
    valid = dvalid & pvalid & inbounds
    w = np.where(valid, weight, 0.0)
    r = np.where(valid[..., None], r, 0.0)
    if not need_jac:
        return r, w, None, inbounds
    Jp, Jk_proj = projection_jacobians(Xd, k)
    G = np.matmul(Jp, Rd.transpose(0, 2, 1)[:, None])  # d uv / d P_world
    M, P = d.shape
    Ja = np.empty((M, P, 2, 6))
    Ja[..., :3] = G
    Ja[..., 3:] = np.cross(Pw[:, :, None, :], G)
    RsB = np.matmul(B[None], Rs.transpose(0, 2, 1))
    Jd = np.matmul(G, (-RsB / (dsafe * dsafe)[..., None])[..., None])[..., 0]
    RdB = np.matmul(Rs[:, None], dB[None]) / dsafe[..., None, None]
    Jk = Jk_proj + np.matmul(G, RdB)
    return r, w, (Ja, -Ja, Jd, Jk), inbounds


def dense_flow_residual(T_i: Pose, T_j: Pose, D_i: np.ndarray, k: Intrinsics, edge_flow: FlowField) -> ResidualBlock:
    """Flow residual of one edge on the grid described by ``k``.

    ``r[u] = proj(T_j^-1 T_i unproj(u, D_i[u])) - u - F_ij[u]``; pixels that do
    not reproject inside image j get weight 0.
    """
    h, w = D_i.shape
    grid = pixel_grid(w, h).reshape(-1, 2)
    B, ray_ok = rays(grid, k)
    dB = ray_jacobian(grid, k)
    weight = np.where(ray_ok, edge_flow.weight.reshape(-1), 0.0)
    r, wt, jac, _ = _edge_terms(
        T_i.R[None], T_i.t[None], T_j.R[None], T_j.t[None],
        np.asarray(D_i, dtype=float).reshape(1, -1), grid, B, dB, k,
        edge_flow.flow.reshape(1, -1, 2), weight[None],
    )
    Ja, Jb, Jd, Jk = jac
    return ResidualBlock(
        r[0].reshape(h, w, 2),
        wt[0].reshape(h, w),
        {
            "pose_i": Ja[0].reshape(h, w, 2, 6),
            "pose_j": Jb[0].reshape(h, w, 2, 6),
            "depth": Jd[0].reshape(h, w, 2),
            "intrinsics": Jk[0].reshape(h, w, 2, k.num_params),
        },
    )


def splat_tracks(tracks: TrackSet, mask: np.ndarray | None, shape, scale: float = LOWRES_FACTOR) -> FlowField:
    """Bilinearly splat track displacements onto the grid of frame i.

    Coordinates are divided by ``scale`` first. Each pixel receives the
    bilinear-weight-normalised mean displacement; its weight is
    ``min(1, sum of bilinear weights)`` times the mean confidence. Tracks whose
    source point falls on a zero of ``mask`` are dropped.
    """
    h, w = shape
    acc_w = np.zeros(h * w)
    acc_c = np.zeros(h * w)
    acc_f = np.zeros((h * w, 2))
    if len(tracks):
        q = tracks.p_i / scale
        disp = (tracks.p_j - tracks.p_i) / scale
        conf = tracks.confidence
        keep = np.isfinite(q).all(axis=1) & np.isfinite(disp).all(axis=1)
        keep &= (q[:, 0] > -1) & (q[:, 0] < w) & (q[:, 1] > -1) & (q[:, 1] < h)
        if mask is not None:
            near = np.rint(q).astype(int)
            inside = (near[:, 0] >= 0) & (near[:, 0] < w) & (near[:, 1] >= 0) & (near[:, 1] < h)
            keep &= inside
            ok = np.zeros(len(q), dtype=bool)
            ok[inside] = np.asarray(mask)[near[inside, 1], near[inside, 0]] > 0
            keep &= ok
        q, disp, conf = q[keep], disp[keep], conf[keep]
        x0 = np.floor(q[:, 0]).astype(int)
        y0 = np.floor(q[:, 1]).astype(int)
        fx = q[:, 0] - x0
        fy = q[:, 1] - y0
        for dx, dy, bw in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            xs, ys = x0 + dx, y0 + dy
            ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h) & (bw > 0)
            idx = ys[ok] * w + xs[ok]
            np.add.at(acc_w, idx, bw[ok])
            np.add.at(acc_c, idx, bw[ok] * conf[ok])
            np.add.at(acc_f, idx, bw[ok, None] * disp[ok])
    good = acc_w >= SPLAT_MIN_WEIGHT
    flow = np.zeros((h * w, 2))
    flow[good] = acc_f[good] / acc_w[good, None]
    weight = np.zeros(h * w)
    weight[good] = np.minimum(1.0, acc_w[good]) * (acc_c[good] / acc_w[good])
    return FlowField(flow.reshape(h, w, 2), weight.reshape(h, w))


def bilerp(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a 2-D array at (n, 2) coordinates (x, y), clamped at borders."""
    h, w = image.shape
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(int), h - 2 if h > 1 else 0)
    fx, fy = x - x0, y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )


def sparse_track_residual(T_i: Pose, T_j: Pose, D_i: np.ndarray, k: Intrinsics, tracks: TrackSet, scale: float = LOWRES_FACTOR) -> np.ndarray:
    """Direct track residual ``proj(T_j^-1 T_i unproj(p_i, Bilerp(D_i, p_i))) - p_j``.

    Evaluated on the grid of ``k`` (track coordinates divided by ``scale``).
    """
    p_i = tracks.p_i / scale
    p_j = tracks.p_j / scale
    d = bilerp(np.asarray(D_i, dtype=float), p_i)
    B, _ = rays(p_i, k)
    X = B / d[:, None]
    rel = T_j.inverse() @ T_i
    uv, _ = project_points(rel.act(X), k)
    return uv - p_j


def depth_prior_residual(D_i: np.ndarray, D_prior: np.ndarray, m: np.ndarray) -> ResidualBlock:
    D_i = np.asarray(D_i, dtype=float)
    D_prior = np.asarray(D_prior, dtype=float)
    if D_i.shape != D_prior.shape or np.shape(m) != D_i.shape:
        raise ValueError("depth, prior and uncertainty must share a shape")
    return ResidualBlock(D_i - D_prior, np.asarray(m, dtype=float), {"depth": np.ones_like(D_i)})


def apply_static_mask(edge_flow: FlowField, mask: np.ndarray) -> FlowField:
    mask = np.asarray(mask)
    if mask.shape != edge_flow.shape:
        raise ValueError("mask and flow must share a shape")
    return FlowField(edge_flow.flow, edge_flow.weight * (mask > 0))


# --------------------------------------------------------------------------
# Whole-graph assembly
# --------------------------------------------------------------------------


@dataclass
class VariableLayout:
    """Which unknowns are free in a solve.

    ``poses`` lists rig-pose frame indices, ``depths`` lists keyframe ids.
    Camera columns are ordered as 6 per pose followed by the intrinsics.
    """

    poses: list
    depths: list
    intrinsics: bool = False
    num_intrinsics: int = 1

    def __post_init__(self):
        self.pose_col = {p: 6 * n for n, p in enumerate(self.poses)}

    @property
    def num_camera(self) -> int:
        return 6 * len(self.poses) + (self.num_intrinsics if self.intrinsics else 0)

    @property
    def intrinsics_col(self) -> int:
        return 6 * len(self.poses)

    def block_sizes(self) -> list[int]:
        sizes = [6] * len(self.poses)
        if self.intrinsics:
            sizes.append(self.num_intrinsics)
        return sizes


@dataclass
class DepthBlock:
    """Coupling between the depths of one keyframe and a few camera columns."""

    keyframe: int
    offset: int
    cols: np.ndarray
    C: np.ndarray  # (P, len(cols))


@dataclass
class NormalEquations:
    H_cc: np.ndarray
    g_c: np.ndarray
    H_dd: np.ndarray
    g_d: np.ndarray
    blocks: list
    block_sizes: list

    @property
    def num_camera(self) -> int:
        return len(self.g_c)

    @property
    def num_depth(self) -> int:
        return len(self.g_d)

    def coupling(self) -> np.ndarray:
        """Dense H_cd (num_camera, num_depth)."""
        H_cd = np.zeros((self.num_camera, self.num_depth))
        for b in self.blocks:
            H_cd[np.ix_(b.cols, np.arange(b.offset, b.offset + b.C.shape[0]))] += b.C.T
        return H_cd

    def dense(self):
        """Full symmetric system (cameras first, then depths) and gradient."""
        nc, nd = self.num_camera, self.num_depth
        H = np.zeros((nc + nd, nc + nd))
        H[:nc, :nc] = self.H_cc
        H_cd = self.coupling()
        H[:nc, nc:] = H_cd
        H[nc:, :nc] = H_cd.T
        H[nc:, nc:] = np.diag(self.H_dd)
        return H, np.concatenate([self.g_c, self.g_d])


@dataclass
class EnergyTerms:
    dense: float = 0.0
    sparse: float = 0.0
    depth: float = 0.0

    @property
    def total(self) -> float:
        return self.dense + self.sparse + self.depth


def _intrinsics_chain(k: Intrinsics) -> np.ndarray:
    """d(raw params)/d(log f, logit alpha)."""
    if k.num_params == 1:
        return np.array([k.f])
    return np.array([k.f, k.alpha * (1.0 - k.alpha)])


def huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    s = np.linalg.norm(r, axis=-1)
    return np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))


def huber_cost(r: np.ndarray, delta: float) -> np.ndarray:
    s = np.linalg.norm(r, axis=-1)
    return np.where(s <= delta, s * s, 2.0 * delta * s - delta * delta)


class Measurements:
    """Flow measurements of a graph packed for batched evaluation.

    Built once per solve: targets and weights are fixed while poses, depths
    and intrinsics move. When ``active`` is set it replaces the image-bounds
    test of reprojections; ``inbounds`` records the mask of the last
    evaluation.
    """

    def __init__(self, graph, switches: TermSwitches, edges=None):
        self.graph = graph
        src, dst, tgt, wts, kinds = [], [], [], [], []
        keys = list(graph.edges) if edges is None else list(edges)
        for key in keys:
            e = graph.edges[key]
            mask = graph.keyframes[e.src].static_mask if switches.mask else None
            if switches.dense and e.flow is not None:
                ff = e.flow if mask is None else apply_static_mask(e.flow, mask)
                src.append(e.src)
                dst.append(e.dst)
                tgt.append(ff.flow.reshape(-1, 2))
                wts.append(ff.weight.reshape(-1))
                kinds.append(0)
            if switches.sparse and e.tracks is not None and len(e.tracks):
                ff = e.splat(mask, graph.grid_shape)
                if mask is not None:
                    # bilinear neighbours of a static track can fall on masked pixels
                    ff = apply_static_mask(ff, mask)
                if np.any(ff.weight > 0):
                    src.append(e.src)
                    dst.append(e.dst)
                    tgt.append(ff.flow.reshape(-1, 2))
                    wts.append(ff.weight.reshape(-1))
                    kinds.append(1)
        self.src = np.array(src, dtype=int)
        self.dst = np.array(dst, dtype=int)
        P = graph.grid_shape[0] * graph.grid_shape[1]
        self.target = np.array(tgt).reshape(len(src), P, 2)
        self.weight = np.array(wts).reshape(len(src), P)
        self.kind = np.array(kinds, dtype=int)
        self.active = None
        self.inbounds = None

    def __len__(self) -> int:
        return len(self.src)


def _view_arrays(graph, ids):
    R = np.empty((len(ids), 3, 3))
    t = np.empty((len(ids), 3))
    for n, i in enumerate(ids):
        v = graph.view_pose(int(i))
        R[n] = v.R
        t[n] = v.t
    return R, t


def assemble_energy(
    graph,
    switches: TermSwitches = TermSwitches(),
    layout: VariableLayout | None = None,
    alpha_reg: float = 0.05,
    huber_delta: float | None = None,
    measurements: Measurements | None = None,
):
    """Evaluate the full energy and, when ``layout`` is given, its normal equations.

    ``e = sum_E e_dense + sum_E e_sparse + alpha_reg * sum_V e_depth`` with
    ``e = sum w * |r|^2``. Returns ``(EnergyTerms, NormalEquations | None)``;
    the gradient is ``J^T W r`` (half the energy gradient).
    """
    if not graph.keyframes or not graph.edges:
        raise EmptyGraph("graph needs keyframes and at least one edge")
    meas = measurements if measurements is not None else Measurements(graph, switches)
    k = graph.intrinsics.scaled(LOWRES_FACTOR)
    h, w = graph.grid_shape
    P = h * w
    grid = pixel_grid(w, h).reshape(-1, 2)
    B, ray_ok = rays(grid, k)
    need_jac = layout is not None
    dB = ray_jacobian(grid, k) if need_jac else np.zeros((P, 3, k.num_params))
    terms = EnergyTerms()

    ne = None
    if need_jac:
        nc = layout.num_camera
        depth_offset = {}
        off = 0
        for kf in layout.depths:
            depth_offset[kf] = off
            off += P
        H_cc = np.zeros((nc, nc))
        g_c = np.zeros(nc)
        H_dd = np.zeros(off)
        g_d = np.zeros(off)
        coupling: dict[int, list] = {kf: [] for kf in layout.depths}

    if len(meas):
        Rs, ts = _view_arrays(graph, meas.src)
        Rd, td = _view_arrays(graph, meas.dst)
        D = np.stack([graph.keyframes[i].inv_depth.reshape(-1) for i in meas.src])
        weight = meas.weight * ray_ok[None]
        r, wt, jac, meas.inbounds = _edge_terms(Rs, ts, Rd, td, D, grid, B, dB, k, meas.target, weight, need_jac, meas.active)
        if huber_delta is not None:
            cost = wt * huber_cost(r, huber_delta)
            wt = wt * huber_weights(r, huber_delta)
        else:
            cost = wt * np.sum(r * r, axis=-1)
        per_meas = cost.sum(axis=1)
        terms.dense = float(per_meas[meas.kind == 0].sum())
        terms.sparse = float(per_meas[meas.kind == 1].sum())

        if need_jac:
            Ja, Jb, Jd, Jk = jac
            M = len(meas)
            nk = layout.num_intrinsics if layout.intrinsics else 0
            n = 12 + nk
            Jc = np.empty((M, P, 2, n))
            Jc[..., :6] = Ja
            Jc[..., 6:12] = Jb
            if nk:
                Jc[..., 12:] = Jk * _intrinsics_chain(k)
            # column index of each of the n local parameters, -1 when fixed
            idx = np.full((M, n), -1, dtype=int)
            for m in range(M):
                a = graph.keyframes[meas.src[m]].frame_index
                b = graph.keyframes[meas.dst[m]].frame_index
                if a in layout.pose_col:
                    idx[m, :6] = layout.pose_col[a] + np.arange(6)
                if b in layout.pose_col:
                    idx[m, 6:12] = layout.pose_col[b] + np.arange(6)
                if nk:
                    idx[m, 12:] = layout.intrinsics_col + np.arange(nk)
            Jw = Jc * wt[..., None, None]
            Jflat = Jc.reshape(M, 2 * P, n)
            Jwflat = Jw.reshape(M, 2 * P, n)
            Hm = np.matmul(Jwflat.transpose(0, 2, 1), Jflat)
            gm = np.matmul(Jwflat.transpose(0, 2, 1), r.reshape(M, 2 * P, 1))[..., 0]
            ok = idx >= 0
            rows = np.broadcast_to(idx[:, :, None], Hm.shape)
            cols = np.broadcast_to(idx[:, None, :], Hm.shape)
            sel = ok[:, :, None] & ok[:, None, :]
            np.add.at(H_cc, (rows[sel], cols[sel]), Hm[sel])
            np.add.at(g_c, idx[ok], gm[ok])

            wJd = wt[..., None] * Jd
            hdd = np.sum(wJd * Jd, axis=-1)
            gd = np.sum(wJd * r, axis=-1)
            Cm = np.matmul(wJd[:, :, None, :], Jc)[:, :, 0, :]
            for m in range(M):
                s = int(meas.src[m])
                if s in depth_offset:
                    o = depth_offset[s]
                    H_dd[o : o + P] += hdd[m]
                    g_d[o : o + P] += gd[m]
                    coupling[s].append(m)
            blocks = []
            for kf in layout.depths:
                ms = coupling[kf]
                if not ms:
                    continue
                cols_kf = np.unique(idx[ms][ok[ms]])
                if len(cols_kf) == 0:
                    continue
                pos = {c: n for n, c in enumerate(cols_kf)}
                C = np.zeros((P, len(cols_kf)))
                for m in ms:
                    sel_m = ok[m]
                    local = np.array([pos[c] for c in idx[m][sel_m]], dtype=int)
                    np.add.at(C.T, local, Cm[m][:, sel_m].T)
                blocks.append(DepthBlock(kf, depth_offset[kf], cols_kf, C))

    if switches.depth_reg:
        e_depth = 0.0
        for i, kf in enumerate(graph.keyframes):
            if kf.inv_depth is None or kf.prior_inv_depth is None:
                continue
            m = kf.prior_uncertainty if kf.prior_uncertainty is not None else np.ones(kf.inv_depth.shape)
            res = depth_prior_residual(kf.inv_depth, kf.prior_inv_depth, m)
            e_depth += res.energy()
            if need_jac and i in depth_offset:
                o = depth_offset[i]
                wm = alpha_reg * res.weights.reshape(-1)
                H_dd[o : o + P] += wm
                g_d[o : o + P] += wm * res.values.reshape(-1)
        terms.depth = alpha_reg * e_depth

    if need_jac:
        if not len(meas):
            blocks = []
        ne = NormalEquations(H_cc, g_c, H_dd, g_d, blocks, layout.block_sizes())
    return terms, ne
