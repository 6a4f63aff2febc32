import numpy as np
import pytest

from videopose import sim
from videopose.geometry import Intrinsics, project, unproject
from videopose.residuals import LOWRES_FACTOR


def test_plane_intersection_brute_force(rng):
    pl = sim.Plane(np.array([0.0, 0.0, 5.0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), (-2, 2, -1, 1))
    o = rng.normal(0, 0.3, (50, 3))
    d = np.column_stack([rng.uniform(-0.6, 0.6, (50, 2)), np.ones(50)])
    t, a, b = pl.intersect(o, d)
    for n in range(50):
        hit_t = (5.0 - o[n, 2]) / d[n, 2]
        p = o[n] + hit_t * d[n]
        inside = -2 <= p[0] <= 2 and -1 <= p[1] <= 1
        assert (t[n] == pytest.approx(hit_t)) if inside else np.isinf(t[n])


def test_box_intersection_from_outside():
    box = sim.MovingBox(np.array([0.0, 0.0, 4.0]), np.array([1.0, 1.0, 0.5]), np.array([0.1, 0.0, 0.0]))
    o = np.zeros((2, 3))
    d = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
    t = box.intersect(o, d, 0)
    assert t[0] == pytest.approx(3.5) and np.isinf(t[1])
    assert box.intersect(o, d, 10)[0] == pytest.approx(3.5)


def test_scene_is_deterministic_and_reversible():
    a, b = sim.make_scene(30, seed=3), sim.make_scene(30, seed=3)
    assert all(p.allclose(q, 0.0) for p, q in zip(a.poses, b.poses))
    r = a.reversed()
    assert r.poses[0] is a.poses[-1]
    assert not sim.make_scene(30, seed=4).poses[5].allclose(a.poses[5], 1e-6)


def test_palindromic_trajectory_mirrors():
    s = sim.make_scene(41, palindromic=True)
    for n in range(41):
        assert s.poses[n].allclose(s.poses[40 - n], 1e-12)


def test_trajectory_moves_smoothly():
    s = sim.make_scene(100)
    steps = np.linalg.norm(np.diff([p.t for p in s.poses], axis=0), axis=1)
    assert steps.min() > 0
    assert steps.max() < 4 * np.median(steps)


def test_rendered_depth_reprojects_between_frames():
    s = sim.make_scene(20, seed=1)
    k = s.intrinsics.scaled(LOWRES_FACTOR)
    inv, mask = sim.render_depth(s, 0, k)
    flow = sim.induced_flow(s, 0, 7, k)
    rel = s.poses[7].inverse() @ s.poses[0]
    ys, xs = np.nonzero(flow.weight > 0)
    for y, x in list(zip(ys, xs))[::37]:
        uv = project(rel.act(unproject([x, y], inv[y, x], k)), k)
        assert np.allclose(uv - [x, y], flow.flow[y, x], atol=1e-9)
    assert mask.all()


def test_flow_noise_has_requested_spread():
    s = sim.make_scene(10, seed=1)
    k = s.intrinsics.scaled(LOWRES_FACTOR)
    clean = sim.induced_flow(s, 0, 3, k)
    noisy = sim.induced_flow(s, 0, 3, k, 0.25, np.random.default_rng(0))
    assert np.std(noisy.flow - clean.flow) == pytest.approx(0.25, rel=0.1)


def test_dynamic_object_masked_and_moving():
    s = sim.make_scene(40, dynamic=True)
    _, mask = sim.render_depth(s, 20)
    frac = 1 - mask.mean()
    assert 0.1 < frac < 0.5
    k = s.intrinsics.scaled(LOWRES_FACTOR)
    grid_mask = sim.render_depth(s, 20, k)[1]
    t = sim.sample_tracks(s, [(20, 21)], 50, k=k)
    px = np.rint(t.p_i).clip([0, 0], [k.width - 1, k.height - 1]).astype(int)
    assert grid_mask[px[:, 1], px[:, 0]].mean() > 0.9


def test_tracks_on_grid_sit_on_lattice():
    s = sim.make_scene(10)
    t = sim.sample_tracks(s, [(0, 4)], 40, on_grid=LOWRES_FACTOR)
    assert len(t) == 40
    assert np.all(t.p_i % LOWRES_FACTOR == 0)


def test_video_depth_is_affine_in_inverse_depth():
    s = sim.make_scene(5)
    inv, _ = sim.render_depth(s, 2)
    D = sim.video_depth(s, 2, scale=1.5, shift=0.2)
    ok = inv > 0
    assert np.allclose(1 / D[ok], 1.5 * inv[ok] + 0.2)


def test_depth_prior_scales_with_assumed_focal():
    s = sim.make_scene(5)
    k = s.intrinsics
    a, _ = sim.depth_prior(s, 1, k, LOWRES_FACTOR)
    b, _ = sim.depth_prior(s, 1, Intrinsics.pinhole(2 * k.f, k.width, k.height), LOWRES_FACTOR)
    assert np.allclose(b, a / 2)


def test_rendered_image_in_unit_range():
    img = sim.render_image(sim.make_scene(3), 1)
    assert img.shape == (sim.DEFAULT_HEIGHT, sim.DEFAULT_WIDTH)
    assert 0 <= img.min() and img.max() <= 1 and img.std() > 0.05
