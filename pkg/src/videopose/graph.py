"""Keyframe graph: vertices, directed flow edges, window construction and covisibility."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import EmptyDepth, NoKeyframes
from .geometry import Intrinsics, Pose, interpolate, pixel_grid, project_points, unproject_points
from .residuals import LOWRES_FACTOR, FlowField, TrackSet, splat_tracks


def grid_shape(width: float, height: float) -> tuple[int, int]:
    return math.ceil(height / LOWRES_FACTOR), math.ceil(width / LOWRES_FACTOR)


@dataclass
class Keyframe:
    frame_index: int
    pose: Pose
    inv_depth: Optional[np.ndarray] = None
    prior_inv_depth: Optional[np.ndarray] = None
    prior_uncertainty: Optional[np.ndarray] = None
    static_mask: Optional[np.ndarray] = None
    camera: int = 0
    optimized: bool = False

    def depth_for_geometry(self) -> np.ndarray:
        if self.optimized or self.prior_inv_depth is None:
            return self.inv_depth
        return self.prior_inv_depth

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.pose.q.tobytes())
        h.update(self.pose.t.tobytes())
        for a in (self.inv_depth, self.prior_inv_depth, self.prior_uncertainty, self.static_mask):
            if a is not None:
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass
class Edge:
    src: int
    dst: int
    flow: Optional[FlowField] = None
    tracks: Optional[TrackSet] = None
    kind: str = "temporal"
    covis: float = float("nan")
    _splats: dict = field(default_factory=dict, repr=False)

    def splat(self, mask, shape) -> FlowField:
        key = mask is not None
        if key not in self._splats:
            self._splats[key] = splat_tracks(self.tracks, mask, shape)
        return self._splats[key]


class BAGraph:
    """Keyframe vertices plus directed edges keyed by ``(src, dst)``.

    Every keyframe belongs to a rig pose identified by its frame index; with a
    camera rig, view ``v`` of that frame sits at ``pose @ rig[v]``.
    """

    def __init__(self, intrinsics: Intrinsics, rig: list[Pose] | None = None):
        self.intrinsics = intrinsics
        self.rig = list(rig) if rig is not None else [Pose.identity()]
        self.keyframes: list[Keyframe] = []
        self.edges: dict[tuple[int, int], Edge] = {}

    @property
    def grid_shape(self) -> tuple[int, int]:
        return grid_shape(self.intrinsics.width, self.intrinsics.height)

    def add_keyframe(self, kf: Keyframe) -> int:
        if self.keyframes and kf.frame_index < self.keyframes[-1].frame_index:
            raise ValueError("keyframes must be added in time order")
        self.keyframes.append(kf)
        return len(self.keyframes) - 1

    def add_edge(self, edge: Edge) -> bool:
        if edge.src == edge.dst:
            raise ValueError("self edges are not allowed")
        n = len(self.keyframes)
        if not (0 <= edge.src < n and 0 <= edge.dst < n):
            raise IndexError("edge endpoint is not a vertex")
        key = (edge.src, edge.dst)
        if key in self.edges:
            return False
        self.edges[key] = edge
        return True

    def view_pose(self, i: int) -> Pose:
        kf = self.keyframes[i]
        T = self.rig[kf.camera]
        if T.q[0] == 1.0 and not np.any(T.t):
            return kf.pose
        return kf.pose @ T

    def frame_indices(self) -> list[int]:
        """Distinct keyframe timestamps in order."""
        seen = []
        for kf in self.keyframes:
            if not seen or seen[-1] != kf.frame_index:
                seen.append(kf.frame_index)
        return seen

    def set_pose(self, frame_index: int, pose: Pose):
        for kf in self.keyframes:
            if kf.frame_index == frame_index:
                kf.pose = pose

    def direction(self, src: int, dst: int) -> str:
        return "bi" if (dst, src) in self.edges else "uni"

    def dump(self) -> str:
        lines = []
        for (i, j), e in self.edges.items():
            lines.append(f"EDGE {i} {j} {self.direction(i, j)} {e.covis:.6f}")
        return "\n".join(lines)


def covisibility(graph: BAGraph, i: int, j: int) -> float:
    """Fraction of keyframe i's valid pixels that reproject inside keyframe j."""
    kf_i = graph.keyframes[i]
    depth = kf_i.depth_for_geometry()
    if depth is None:
        raise EmptyDepth(f"keyframe {i} has no depth")
    k = graph.intrinsics.scaled(LOWRES_FACTOR)
    h, w = depth.shape
    X, valid = unproject_points(pixel_grid(w, h), depth, k)
    valid &= np.isfinite(depth)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyDepth(f"keyframe {i} has no valid depth")
    rel = graph.view_pose(j).inverse() @ graph.view_pose(i)
    uv, ok = project_points(rel.act(X[valid]), k)
    inside = ok & (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    return float(inside.sum()) / n_valid


# Supplies (flow, tracks) for a directed keyframe pair, or None when unavailable.
EdgeFactory = Callable[[Keyframe, Keyframe], Optional[tuple]]


def _make(graph: BAGraph, s: int, d: int, make_edge: EdgeFactory | None, kind: str, score: float) -> Optional[Edge]:
    if make_edge is None:
        return Edge(s, d, kind=kind, covis=score)
    data = make_edge(graph.keyframes[s], graph.keyframes[d])
    if data is None:
        return None
    flow, tracks = data
    return Edge(s, d, flow, tracks, kind=kind, covis=score)


def _connect(graph: BAGraph, a: int, b: int, make_edge: EdgeFactory | None, kind: str, score: float, added: list):
    for s, d in ((a, b), (b, a)):
        if (s, d) in graph.edges:
            continue
        e = _make(graph, s, d, make_edge, kind, score)
        if e is not None and graph.add_edge(e):
            added.append((s, d))


def build_frontend_window(
    graph: BAGraph,
    new_kf: int,
    window_size: int = 8,
    covis_threshold: float = 0.5,
    make_edge: EdgeFactory | None = None,
    temporal_radius: int = 3,
    cross_covis_threshold: float = 0.3,
    max_loop_edges: int = 2,
) -> list[tuple[int, int]]:
    """Connect ``new_kf`` to the graph and return the directed edges added.

    Same-camera keyframes within ``temporal_radius`` timesteps are always
    linked; other same-camera keyframes in the window need covisibility
    ``>= covis_threshold``; views of other cameras need
    ``>= cross_covis_threshold``. Older keyframes outside the window become
    loop edges when covisible, at most ``max_loop_edges`` of them.
    """
    times = graph.frame_indices()
    rank = {f: n for n, f in enumerate(times)}
    kf = graph.keyframes[new_kf]
    r_new = rank[kf.frame_index]
    added: list[tuple[int, int]] = []
    loop_candidates = []

    def score(a, b):
        try:
            return max(covisibility(graph, a, b), covisibility(graph, b, a))
        except EmptyDepth:
            return 0.0

    for other, okf in enumerate(graph.keyframes):
        if other == new_kf:
            continue
        r = rank[okf.frame_index]
        dist = r_new - r
        if dist < 0:
            continue
        if dist == 0:
            s = score(new_kf, other)
            if s >= cross_covis_threshold:
                _connect(graph, other, new_kf, make_edge, "cross", s, added)
            continue
        same_cam = okf.camera == kf.camera
        if dist <= window_size:
            if same_cam and dist <= temporal_radius:
                _connect(graph, other, new_kf, make_edge, "temporal", float("nan"), added)
                continue
            s = score(new_kf, other)
            thr = covis_threshold if same_cam else cross_covis_threshold
            if s >= thr:
                _connect(graph, other, new_kf, make_edge, "covis" if same_cam else "cross", s, added)
        elif same_cam and max_loop_edges > 0:
            s = score(new_kf, other)
            if s >= covis_threshold:
                loop_candidates.append((-s, other))
    for neg, other in sorted(loop_candidates)[:max_loop_edges]:
        _connect(graph, other, new_kf, make_edge, "loop", -neg, added)
    return added


@dataclass
class InfillProblem:
    graph: BAGraph
    free_vertex: int
    frame_index: int
    neighbours: tuple


def build_infill_graph(
    graph: BAGraph,
    frame_index: int,
    make_edge: EdgeFactory | None = None,
    camera: int | None = None,
) -> InfillProblem:
    """Local graph tying one non-keyframe to its two temporally nearest keyframes.

    The local graph shares keyframe objects read-only; only the appended
    non-keyframe vertex is meant to be optimised. Edges run keyframe -> frame.
    """
    if not graph.keyframes:
        raise NoKeyframes("graph has no keyframes")
    times = graph.frame_indices()
    prev = [f for f in times if f < frame_index]
    nxt = [f for f in times if f > frame_index]
    if prev and nxt:
        chosen = (prev[-1], nxt[0])
    elif len(times) >= 2:
        chosen = tuple(prev[-2:]) if not nxt else tuple(nxt[:2])
    else:
        chosen = (times[0],)
    pa = _pose_of(graph, chosen[0])
    if len(chosen) == 2:
        pb = _pose_of(graph, chosen[1])
        s = (frame_index - chosen[0]) / (chosen[1] - chosen[0])
        init = interpolate(pa, pb, s)
    else:
        init = pa
    local = BAGraph(graph.intrinsics, graph.rig)
    kept = [kf for kf in graph.keyframes if kf.frame_index in chosen and (camera is None or kf.camera == camera)]
    local.keyframes.extend(kept)
    cams = sorted({kf.camera for kf in kept})
    free_ids = {}
    for c in cams:
        free_ids[c] = len(local.keyframes)
        local.keyframes.append(Keyframe(frame_index, init, camera=c))
    for n, kf in enumerate(kept):
        dst = free_ids[kf.camera]
        e = _make(local, n, dst, make_edge, "infill", float("nan"))
        if e is not None:
            local.add_edge(e)
    return InfillProblem(local, free_ids[cams[0]], frame_index, chosen)


def _pose_of(graph: BAGraph, frame_index: int) -> Pose:
    for kf in graph.keyframes:
        if kf.frame_index == frame_index:
            return kf.pose
    raise KeyError(frame_index)
