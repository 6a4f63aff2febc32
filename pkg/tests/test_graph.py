import math

import numpy as np
import pytest

from videopose.errors import EmptyDepth, NoKeyframes
from videopose.geometry import Intrinsics, Pose, project, unproject
from videopose.graph import (
    BAGraph,
    Edge,
    Keyframe,
    build_frontend_window,
    build_infill_graph,
    covisibility,
    grid_shape,
)
from videopose.residuals import LOWRES_FACTOR

K = Intrinsics.pinhole(100.0, 128, 96)


def _graph(poses, depth=0.5, frames=None):
    g = BAGraph(K)
    h, w = g.grid_shape
    for n, p in enumerate(poses):
        g.add_keyframe(Keyframe(frames[n] if frames else n, p, np.full((h, w), depth)))
    return g


def _covis_brute_force(g, i, j):
    k = g.intrinsics.scaled(LOWRES_FACTOR)
    D = g.keyframes[i].inv_depth
    rel = g.view_pose(j).inverse() @ g.view_pose(i)
    hits = 0
    for y in range(D.shape[0]):
        for x in range(D.shape[1]):
            X = rel.act(unproject([x, y], D[y, x], k))
            if X[2] <= 0:
                continue
            u, v = project(X, k)
            hits += 0 <= u < k.width and 0 <= v < k.height
    return hits / D.size


def test_grid_shape_rounds_up():
    assert grid_shape(256, 192) == (24, 32)
    assert grid_shape(250, 190) == (24, 32)


@pytest.mark.parametrize("shift", [0.0, 0.3, 0.9, 2.5])
def test_covisibility_matches_pixel_loop(rng, shift):
    g = _graph([Pose.identity(), Pose.exp(np.array([shift, 0.1 * shift, 0, 0, 0.05, 0]))])
    g.keyframes[0].inv_depth = rng.uniform(0.2, 1.0, g.keyframes[0].inv_depth.shape)
    assert covisibility(g, 0, 1) == pytest.approx(_covis_brute_force(g, 0, 1), abs=1e-12)


def test_covisibility_extremes():
    g = _graph([Pose.identity(), Pose.identity(), Pose.exp(np.array([0, 0, 0, 0, math.pi, 0]))])
    assert covisibility(g, 0, 1) == 1.0
    assert covisibility(g, 0, 2) == 0.0


def test_covisibility_needs_depth():
    g = _graph([Pose.identity(), Pose.identity()])
    g.keyframes[0].inv_depth = np.full(g.grid_shape, np.nan)
    with pytest.raises(EmptyDepth):
        covisibility(g, 0, 1)


def test_edge_bookkeeping():
    g = _graph([Pose.identity(), Pose.identity()])
    assert g.add_edge(Edge(0, 1, covis=0.5))
    assert not g.add_edge(Edge(0, 1))
    with pytest.raises(ValueError):
        g.add_edge(Edge(1, 1))
    with pytest.raises(IndexError):
        g.add_edge(Edge(0, 5))
    assert g.direction(0, 1) == "uni"
    g.add_edge(Edge(1, 0, covis=0.5))
    assert g.dump().splitlines() == ["EDGE 0 1 bi 0.500000", "EDGE 1 0 bi 0.500000"]
    with pytest.raises(ValueError):
        g.add_keyframe(Keyframe(-1, Pose.identity()))


def test_window_on_static_camera_links_everything_in_reach():
    g = _graph([Pose.identity()] * 11)
    added = build_frontend_window(g, 10, window_size=8, max_loop_edges=2)
    partners = {a for a, b in added if b == 10}
    assert partners == set(range(2, 10)) | {0, 1}
    assert all((b, a) in g.edges for a, b in added)
    kinds = {g.edges[(a, 10)].kind for a in partners}
    assert kinds == {"temporal", "covis", "loop"}
    assert {a for a in partners if g.edges[(a, 10)].kind == "temporal"} == {7, 8, 9}


def test_loop_edges_capped():
    g = _graph([Pose.identity()] * 14)
    build_frontend_window(g, 13, window_size=8, max_loop_edges=2)
    loops = [k for k, e in g.edges.items() if e.kind == "loop"]
    assert len(loops) == 4  # two partners, both directions


def test_window_skips_low_covisibility():
    poses = [Pose.exp(np.array([3.0 * n, 0, 0, 0, 0, 0])) for n in range(6)]
    g = _graph(poses)
    build_frontend_window(g, 5, window_size=8, temporal_radius=2)
    assert {a for a, b in g.edges if b == 5} == {3, 4}


def test_edge_factory_can_decline():
    g = _graph([Pose.identity()] * 3)
    added = build_frontend_window(g, 2, make_edge=lambda a, b: None)
    assert added == [] and not g.edges


def test_rig_views_compose_with_extrinsics():
    rig = [Pose.identity(), Pose.exp(np.array([0.1, 0, 0, 0, 0.5, 0]))]
    g = BAGraph(K, rig)
    base = Pose.exp(np.array([1.0, 2.0, 0, 0.1, 0, 0]))
    g.add_keyframe(Keyframe(0, base, camera=0))
    g.add_keyframe(Keyframe(0, base, camera=1))
    assert g.view_pose(0) is base
    assert g.view_pose(1).allclose(base @ rig[1], 1e-12)
    assert g.frame_indices() == [0]


def test_infill_graph_between_keyframes():
    a = Pose.identity()
    b = Pose.exp(np.array([1.0, 0, 0, 0, 0.2, 0]))
    g = _graph([a, b], frames=[10, 20])
    prob = build_infill_graph(g, 14)
    assert prob.neighbours == (10, 20)
    free = prob.graph.keyframes[prob.free_vertex]
    assert free.frame_index == 14 and free.inv_depth is None
    assert np.allclose(free.pose.t, b.t * 0.4, atol=0.05)
    assert set(prob.graph.edges) == {(0, 2), (1, 2)}


def test_infill_graph_extrapolates_from_last_two():
    g = _graph([Pose.identity()] * 3, frames=[0, 5, 10])
    assert build_infill_graph(g, 12).neighbours == (5, 10)
    with pytest.raises(NoKeyframes):
        build_infill_graph(BAGraph(K), 3)


def test_fingerprint_tracks_content():
    kf = Keyframe(0, Pose.identity(), np.ones((2, 2)))
    fp = kf.fingerprint()
    kf.inv_depth = kf.inv_depth * 2
    assert kf.fingerprint() != fp
