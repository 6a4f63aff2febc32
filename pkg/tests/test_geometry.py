import math

import mpmath
import numpy as np
import pytest
import scipy.linalg
from scipy import ndimage
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference, random_pose, relative_error
from videopose.errors import DegeneratePoint, InvalidDepth
from videopose.geometry import (
    CubeRig,
    Intrinsics,
    Pose,
    erp_to_cube,
    erp_to_direction,
    direction_to_erp,
    hat,
    interpolate,
    project,
    project_points,
    projection_jacobians,
    q_of_theta,
    ray_jacobian,
    rays,
    rectify_unified_to_pinhole,
    remap,
    unproject,
    unproject_points,
)

PIN = Intrinsics.pinhole(100.0, 640, 480)

twists = st.lists(st.floats(-1.5, 1.5), min_size=6, max_size=6).map(np.array)


def twist_matrix(xi):
    M = np.zeros((4, 4))
    M[:3, :3] = hat(xi[3:])
    M[:3, 3] = xi[:3]
    return M


# -- poses -------------------------------------------------------------------


@given(twists)
def test_exp_matches_matrix_exponential(xi):
    assert np.allclose(Pose.exp(xi).matrix(), scipy.linalg.expm(twist_matrix(xi)), atol=1e-9)


@given(twists)
def test_log_inverts_exp(xi):
    assert np.allclose(Pose.exp(xi).log(), xi, atol=1e-9)
    P = Pose.exp(xi)
    assert Pose.exp(P.log()).allclose(P, 1e-9)


@given(twists, twists)
def test_compose_with_inverse_is_identity(a, b):
    P = Pose.exp(a)
    assert (P @ P.inverse()).allclose(Pose.identity(), 1e-9)
    Q = Pose.exp(b)
    assert np.allclose((P @ Q).matrix(), P.matrix() @ Q.matrix(), atol=1e-9)


@given(twists)
def test_quaternion_stays_unit(xi):
    P = Pose.exp(xi) @ Pose.exp(-0.5 * xi) @ Pose.exp(0.3 * xi)
    assert abs(np.linalg.norm(P.q) - 1.0) < 1e-9


def test_retraction_is_left_multiplicative(rng):
    T = random_pose(rng)
    xi = rng.normal(0, 0.1, 6)
    assert np.allclose(T.retract(xi).matrix(), scipy.linalg.expm(twist_matrix(xi)) @ T.matrix(), atol=1e-12)


def test_interpolate_endpoints_and_midpoint(rng):
    a, b = random_pose(rng), random_pose(rng)
    assert interpolate(a, b, 0.0).allclose(a, 1e-12)
    assert interpolate(a, b, 1.0).allclose(b, 1e-9)
    m = interpolate(a, b, 0.5)
    # the midpoint's relative motion to both ends is equal in size
    assert abs((a.inverse() @ m).rotation_angle() - (m.inverse() @ b).rotation_angle()) < 1e-9


def test_tum_quaternion_round_trip(rng):
    P = random_pose(rng)
    Q = Pose.from_tum(P.t, P.tum_quaternion())
    assert Q.allclose(P, 1e-12)


# -- projection ----------------------------------------------------------------


def test_optical_axis_maps_to_centre():
    assert np.allclose(project([0, 0, 1], PIN), [320, 240])


def test_unit_tangent_point_pinhole():
    assert np.allclose(project([1, 0, 1], PIN), [420, 240])


def test_unified_value_against_high_precision():
    k = Intrinsics.unified(100.0, 0.5, 640, 480)
    mpmath.mp.dps = 40
    theta = mpmath.atan(1)
    q = mpmath.tan(theta) / (1 + mpmath.mpf("0.5") * mpmath.sqrt(mpmath.tan(theta) ** 2 + 1))
    expected = 320 + 100 * q
    u = project([1, 0, 1], k)
    assert abs(u[0] - float(expected)) < 1e-12
    assert abs(float(expected) - (320 + 100 / (1 + 0.5 * math.sqrt(2)))) < 1e-12
    assert u[1] == pytest.approx(240)


def test_behind_camera_raises():
    with pytest.raises(DegeneratePoint):
        project([0, 0, -1], PIN)
    with pytest.raises(DegeneratePoint):
        project([0, 0, 0], PIN)


def test_unproject_centre_ray():
    assert np.allclose(unproject([320, 240], 0.5, PIN), [0, 0, 2])


def test_unproject_rejects_non_positive_depth():
    with pytest.raises(InvalidDepth):
        unproject([320, 240], 0.0, PIN)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.7, 0.95])
def test_round_trip_random_pixels(rng, alpha):
    k = Intrinsics.unified(180.0, alpha, 320, 240) if alpha else Intrinsics.pinhole(180.0, 320, 240)
    uv = rng.uniform([0, 0], [320, 240], size=(1000, 2))
    d = rng.uniform(0.05, 5.0, 1000)
    X, ok = unproject_points(uv, d, k)
    # strongly curved lenses leave the image corners outside the model's valid disc
    assert ok.mean() > 0.9
    back, ok2 = project_points(X[ok], k)
    assert ok2.all()
    assert np.abs(back - uv[ok]).max() < 1e-9
    assert np.allclose(X[ok, 2], 1.0 / d[ok])


def test_unified_alpha_zero_equals_pinhole(rng):
    ku = Intrinsics.unified(150.0, 0.0, 320, 240)
    kp = Intrinsics.pinhole(150.0, 320, 240)
    X = np.column_stack([rng.uniform(-2, 2, (1000, 2)), rng.uniform(0.2, 5, 1000)])
    assert np.abs(project_points(X, ku)[0] - project_points(X, kp)[0]).max() < 1e-12
    uv = rng.uniform([0, 0], [320, 240], size=(1000, 2))
    assert np.abs(rays(uv, ku)[0] - rays(uv, kp)[0]).max() < 1e-12


@given(st.floats(0.0, 0.99))
def test_radial_mapping_is_monotone(alpha):
    theta = np.linspace(0, math.radians(89.4), 2000)
    q = q_of_theta(theta, alpha)
    assert np.all(np.diff(q) > 0)


def test_projection_jacobian_closed_forms():
    J, Jk = projection_jacobians(np.array([0.0, 0.0, 1.0]), PIN)
    assert J[0, 0] == pytest.approx(100.0)
    _, Jk = projection_jacobians(np.array([1.0, 0.0, 1.0]), PIN)
    assert np.allclose(Jk[:, 0], [1.0, 0.0])


@pytest.mark.parametrize("alpha", [0.0, 0.4, 0.8])
def test_projection_jacobians_match_finite_differences(rng, alpha):
    k = Intrinsics.unified(200.0, alpha, 320, 240) if alpha else Intrinsics.pinhole(200.0, 320, 240)
    worst = 0.0
    for _ in range(1000):
        X = np.array([*rng.uniform(-1.5, 1.5, 2), rng.uniform(0.5, 4.0)])
        J, Jk = projection_jacobians(X, k)
        worst = max(worst, relative_error(J, central_difference(lambda p: project_points(p, k)[0], X)))
        fd_k = central_difference(lambda p: project_points(X, k.with_params(p))[0], k.params)
        worst = max(worst, relative_error(Jk, fd_k))
    assert worst < 1e-5


@pytest.mark.parametrize("alpha", [0.0, 0.4, 0.8])
def test_ray_jacobian_matches_finite_differences(rng, alpha):
    k = Intrinsics.unified(200.0, alpha, 320, 240) if alpha else Intrinsics.pinhole(200.0, 320, 240)
    uv = rng.uniform([0, 0], [320, 240], size=(200, 2))
    J = ray_jacobian(uv, k)
    for n in range(len(uv)):
        fd = central_difference(lambda p: rays(uv[n], k.with_params(p))[0], k.params)
        assert relative_error(J[n], fd) < 1e-5


# -- rectification ---------------------------------------------------------------


def test_rectify_identity_for_equal_pinhole():
    k = Intrinsics.unified(100.0, 0.0, 64, 48)
    m, valid = rectify_unified_to_pinhole((48, 64), k, k.as_pinhole())
    ys, xs = np.mgrid[0:48, 0:64]
    assert valid.all()
    assert np.allclose(m[..., 0], xs, atol=1e-12) and np.allclose(m[..., 1], ys, atol=1e-12)


@pytest.mark.parametrize("alpha", [0.2, 0.6, 0.9])
def test_rectify_keeps_centre(alpha):
    k = Intrinsics.unified(100.0, alpha, 64, 48)
    m, _ = rectify_unified_to_pinhole((48, 64), k, k.as_pinhole())
    assert np.allclose(m[24, 32], [32, 24], atol=1e-12)


def _checker_on_plane(uv, k, z=2.0):
    X, ok = unproject_points(uv, np.full(uv.shape[:-1], 1.0 / z), k)
    return np.where(ok, (np.floor(X[..., 0] * 3) + np.floor(X[..., 1] * 3)) % 2, np.nan)


def test_rectified_checkerboard_matches_pinhole_rendering():
    W, H = 160, 120
    src = Intrinsics.unified(90.0, 0.5, W, H)
    tgt = Intrinsics.pinhole(60.0, W, H)
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    grid = np.stack([xs, ys], -1)
    distorted = _checker_on_plane(grid, src)
    m, valid = rectify_unified_to_pinhole((H, W), src, tgt)
    rect = remap(distorted, m, valid)
    truth = _checker_on_plane(grid, tgt)
    use = valid & np.isfinite(rect)
    # away from checker edges (in the source image too, where the sampling blends) values must agree
    src_edge = (ndimage.maximum_filter(distorted, size=3) != ndimage.minimum_filter(distorted, size=3)).astype(float)
    near_edge = remap(src_edge, m, valid) > 0
    interior = use & ~near_edge
    assert interior.mean() > 0.3
    assert np.array_equal(np.rint(rect[interior]), truth[interior])


# -- cube rig --------------------------------------------------------------------


def test_cube_faces_axis_aligned():
    rig = CubeRig.build(32)
    assert rig.face_intrinsics.horizontal_fov() == pytest.approx(math.pi / 2)
    for T in rig.faces:
        R = T.R
        assert np.allclose(np.abs(R).sum(axis=0), 1.0)
        assert np.allclose(T.t, 0.0)


def test_erp_direction_round_trip(rng):
    uv = rng.uniform([0, 0], [511, 255], size=(500, 2))
    back = direction_to_erp(erp_to_direction(uv, 512, 256), 512, 256)
    assert np.allclose(back, uv, atol=1e-9)


def test_erp_to_cube_resamples_smooth_field():
    W, H = 256, 128
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    d = erp_to_direction(np.stack([xs, ys], -1), W, H)
    erp = d[..., 2]  # cosine of the angle to the front axis
    faces = erp_to_cube(erp, CubeRig.build(16))
    assert faces["front"][8, 8] > 0.99
    assert faces["back"][8, 8] < -0.99
    assert abs(faces["left"][8, 8]) < 0.05
