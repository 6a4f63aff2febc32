import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from conftest import random_pose
from videopose import sim
from videopose.errors import DegenerateTrajectory, NormalizationDegenerate, ZeroBaseline
from videopose.geometry import Intrinsics, Pose, so3_exp
from videopose.metrics import (
    Trajectory,
    ate,
    focal_error,
    fov_degrees,
    fundamental_from_relative,
    normalize_length,
    rre,
    rte,
    sampson_error,
    sampson_terms,
    shuttle_metrics,
    umeyama_align,
)

K = Intrinsics.pinhole(200.0, 256, 192)


def random_trajectory(rng, n=20):
    return Trajectory.from_poses([random_pose(rng, 0.5, 2.0) for _ in range(n)])


def _exact_matches(scene, count=60):
    tr = sim.sample_tracks(scene, [(i, i + 1) for i in range(scene.num_frames - 1)], count, 0.0, 7)
    out = {}
    for i in range(scene.num_frames - 1):
        sel = tr.frame_i == i
        out[i] = (tr.p_i[sel], tr.p_j[sel])
    return out


def test_sampson_vanishes_on_exact_correspondences():
    scene = sim.make_scene(12, seed=1)
    traj = Trajectory.from_poses(scene.poses)
    res = sampson_error(traj, scene.intrinsics, _exact_matches(scene))
    assert res.error <= 1e-9
    assert res.pairs == 11


@given(st.floats(1e-6, 1e6), st.booleans())
def test_sampson_invariant_to_fundamental_scale(c, flip):
    rng = np.random.default_rng(0)
    F = rng.normal(size=(3, 3))
    x, y = rng.uniform(0, 200, (30, 2)), rng.uniform(0, 200, (30, 2))
    s = -c if flip else c
    assert np.allclose(sampson_terms(s * F, x, y)[0], sampson_terms(F, x, y)[0], rtol=1e-9)


def test_sampson_approximates_geometric_distance(rng):
    T = Pose.exp(np.array([0.4, 0.05, 0.1, 0.02, 0.1, 0.0]))
    F = fundamental_from_relative(T, K)
    for _ in range(10):
        X = np.array([*rng.uniform(-1, 1, 2), rng.uniform(2, 5)])
        x0 = K.K() @ X
        Xj = T.act(X)
        y0 = K.K() @ Xj
        x = x0[:2] / x0[2] + rng.normal(0, 0.2, 2)
        y = y0[:2] / y0[2] + rng.normal(0, 0.2, 2)

        def constraint(z):
            return np.r_[z[2:], 1.0] @ F @ np.r_[z[:2], 1.0]

        sol = minimize(lambda z: np.sum((z - np.r_[x, y]) ** 2), np.r_[x, y], constraints=[{"type": "eq", "fun": constraint}],
                       method="SLSQP", options={"ftol": 1e-16, "maxiter": 200})
        geometric = math.sqrt(sol.fun)
        sampson = sampson_terms(F, x[None], y[None])[0][0]
        assert sampson == pytest.approx(geometric, rel=1e-3, abs=1e-6)


def test_sampson_divides_by_frame_count():
    scene = sim.make_scene(6, seed=2)
    traj = Trajectory.from_poses(scene.poses)
    m = _exact_matches(scene, 10)
    x, y = m[2]
    bumped = {2: (x, y + [3.0, 0.0])}
    res = sampson_error(traj, scene.intrinsics, bumped)
    T = traj.poses[3].inverse() @ traj.poses[2]
    manual = sampson_terms(fundamental_from_relative(T, scene.intrinsics), x, y + [3.0, 0.0])[0].mean()
    assert res.error == pytest.approx(manual / 6)


def test_fundamental_requires_baseline_and_pinhole():
    with pytest.raises(ZeroBaseline):
        fundamental_from_relative(Pose.exp(np.array([0, 0, 0, 0.1, 0, 0])), K)
    with pytest.raises(ValueError):
        fundamental_from_relative(Pose.exp(np.array([1.0, 0, 0, 0, 0, 0])), Intrinsics.unified(200, 0.3, 256, 192))


def test_identical_trajectories_have_zero_error(rng):
    t = random_trajectory(rng)
    assert ate(t, t) < 1e-12
    assert rte(t, t) < 1e-12 and rre(t, t) < 1e-6
    assert rte(t, t, deltas=[1, 3, 5]) < 1e-12


def test_ate_ignores_rigid_and_similarity_transforms(rng):
    ref = random_trajectory(rng)
    R = so3_exp(rng.normal(size=3))
    t = rng.normal(size=3)
    moved = ref.transformed(R, t)
    assert ate(moved, ref) < 1e-9
    scaled = ref.transformed(R, t, 2.5)
    assert ate(scaled, ref, with_scale=True) < 1e-9
    al = umeyama_align(scaled, ref, with_scale=True)
    assert al.scale == pytest.approx(1 / 2.5)
    assert np.allclose(al.R, R.T)


def test_ate_without_alignment_is_rmse(rng):
    a, b = random_trajectory(rng, 8), random_trajectory(rng, 8)
    d = a.positions() - b.positions()
    assert ate(a, b, align=False) == pytest.approx(math.sqrt(np.mean(np.sum(d**2, axis=1))))


def test_relative_errors_against_constant_drift():
    ref = Trajectory.from_poses([Pose.exp(np.array([n, 0, 0, 0, 0, 0.0])) for n in range(10)])
    est = Trajectory.from_poses([Pose.exp(np.array([1.1 * n, 0, 0, 0, 0, 0.0])) for n in range(10)])
    assert rte(est, ref, align=False) == pytest.approx(0.1)
    assert rte(est, ref, delta=3, align=False) == pytest.approx(0.3)
    turned = Trajectory.from_poses([Pose.exp(np.array([n, 0, 0, 0, 0, 0.01 * n])) for n in range(10)])
    assert rre(turned, ref, align=False) == pytest.approx(math.degrees(0.01))
    with pytest.raises(ValueError):
        rte(est, ref, delta=10)


def test_collinear_alignment_flagged():
    line = Trajectory.from_poses([Pose.exp(np.array([n, 0, 0, 0, 0, 0.0])) for n in range(5)])
    assert umeyama_align(line, line).degenerate
    with pytest.raises(DegenerateTrajectory):
        umeyama_align(Trajectory.from_poses(line.poses[:2]), Trajectory.from_poses(line.poses[:2]))


def test_field_of_view_error():
    assert fov_degrees(Intrinsics.pinhole(128.0, 256, 192)) == pytest.approx(90.0)
    assert focal_error(Intrinsics.pinhole(128.0, 256, 192), Intrinsics.pinhole(128.0, 256, 192)) == 0.0
    with pytest.raises(ValueError):
        focal_error(Intrinsics.pinhole(128.0, 256, 192), Intrinsics.pinhole(128.0, 200, 192))


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), [Pose.identity()] * 2)
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0]), [Pose.identity()] * 2)


def test_shuttle_metrics_zero_for_matching_runs(rng):
    t = random_trajectory(rng)
    res = shuttle_metrics(t, t.scaled(3.0), K, K)
    assert res.s_ate < 1e-9 and res.s_rte < 1e-9 and res.s_focal == 0.0
    with pytest.raises(NormalizationDegenerate):
        normalize_length(Trajectory.from_poses([Pose.identity()] * 3))


def test_reversed_order_keeps_timestamps(rng):
    t = random_trajectory(rng, 5)
    r = t.reversed_order()
    assert np.array_equal(r.timestamps, t.timestamps)
    assert r.poses[0] is t.poses[-1]
