import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_normal_equations, small_sim_graph
from videopose import sim, solver
from videopose.errors import DivergedEnergy, NotPositiveDefinite, SingularDepthBlock
from videopose.solver import (
    BlockCholesky,
    SolverConfig,
    back_substitute,
    block_pattern,
    gauss_newton,
    minimum_degree_ordering,
    schur_eliminate_depth,
    solve_step,
    sparse_factor_solve,
)


@pytest.mark.parametrize("seed", range(5))
def test_schur_solve_equals_dense_solve(seed):
    rng = np.random.default_rng(seed)
    ne, H, g = random_normal_equations(rng, int(rng.integers(2, 7)), int(rng.integers(4, 65)))
    dc, dd = solve_step(ne)
    x = np.linalg.solve(H, -g)
    nc = ne.num_camera
    assert np.abs(dc - x[:nc]).max() < 1e-8 * max(1.0, np.abs(x).max())
    assert np.abs(dd - x[nc:]).max() < 1e-8 * max(1.0, np.abs(x).max())


def test_reduced_system_is_the_schur_complement(rng):
    ne, H, g = random_normal_equations(rng, 3, 10)
    nc = ne.num_camera
    red = schur_eliminate_depth(ne)
    Hcd, Hdd = H[:nc, nc:], H[nc:, nc:]
    S = H[:nc, :nc] - Hcd @ np.linalg.solve(Hdd, Hcd.T)
    b = g[:nc] - Hcd @ np.linalg.solve(Hdd, g[nc:])
    assert np.allclose(red.S, S, atol=1e-9)
    assert np.allclose(red.b, b, atol=1e-9)
    assert np.allclose(ne.dense()[0], H)


def test_singular_depth_entries_freeze_or_raise(rng):
    ne, _, _ = random_normal_equations(rng, 2, 5)
    ne.H_dd[3] = 0.0
    red = schur_eliminate_depth(ne)
    assert red.frozen[3] and red.frozen.sum() == 1
    dd = back_substitute(ne, red, np.zeros(ne.num_camera))
    assert dd[3] == 0.0
    with pytest.raises(SingularDepthBlock):
        schur_eliminate_depth(ne, strict=True)


def _tree_pattern(rng, n):
    adj = [set() for _ in range(n)]
    for v in range(1, n):
        u = int(rng.integers(0, v))
        adj[u].add(v)
        adj[v].add(u)
    return adj


@given(st.integers(2, 12), st.integers(0, 2**31))
def test_minimum_degree_on_trees_creates_no_fill(n, seed):
    rng = np.random.default_rng(seed)
    adj = _tree_pattern(rng, n)
    order = minimum_degree_ordering(adj)
    assert sorted(order.tolist()) == list(range(n))
    S = np.eye(2 * n) * (n + 2)
    for a in range(n):
        for b in adj[a]:
            S[2 * a : 2 * a + 2, 2 * b : 2 * b + 2] = 0.5
    fac = BlockCholesky(S, [2] * n)
    edges = sum(len(a) for a in adj) // 2
    assert fac.fill_blocks == n + edges
    x = rng.normal(size=2 * n)
    assert np.allclose(fac.solve(S @ x), x)


def test_minimum_degree_eliminates_star_leaves_first():
    adj = [{1, 2, 3, 4}, {0}, {0}, {0}, {0}]
    assert minimum_degree_ordering(adj).tolist()[-1] in (0, 4)
    assert minimum_degree_ordering(adj).tolist()[:3] == [1, 2, 3]


def test_block_pattern_detects_nonzero_blocks():
    S = np.eye(6)
    S[0, 5] = S[5, 0] = 1.0
    assert block_pattern(S, [2, 2, 2]) == [{2}, set(), {0}]


def test_block_cholesky_matches_dense(rng):
    A = rng.normal(size=(13, 13))
    S = A @ A.T + np.eye(13)
    rhs = rng.normal(size=13)
    x = sparse_factor_solve(S, rhs, [6, 6, 1])
    assert np.allclose(x, np.linalg.solve(S, rhs), atol=1e-10)


def test_semidefinite_system_is_regularised(rng):
    A = rng.normal(size=(6, 3))
    S = A @ A.T  # rank 3
    x = sparse_factor_solve(S, S @ rng.normal(size=6), [1] * 6)
    assert np.all(np.isfinite(x))


def test_indefinite_system_raises_after_retries():
    S = np.diag([1.0, -1.0])
    with pytest.raises(NotPositiveDefinite):
        sparse_factor_solve(S, np.ones(2), [1, 1])


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_iters=0)
    with pytest.raises(ValueError):
        SolverConfig(damping=-1)


# -- Gauss-Newton -------------------------------------------------------------------


def test_gauss_newton_decreases_energy_and_keeps_gauge():
    g, frames = small_sim_graph(flow_noise=0.0, pose_jitter=0.02)
    anchor = g.keyframes[0].pose
    res = gauss_newton(g, SolverConfig(max_iters=15, optimize_intrinsics=True))
    assert g.keyframes[0].pose is anchor
    for before, after in res.accepted:
        assert after <= before
    assert res.energies[-1] < 1e-3 * res.energies[0]
    scene = sim.make_scene(24, seed=5, width=128, height=96)
    assert abs(g.intrinsics.f / scene.intrinsics.f - 1) < 1e-3
    for kf in g.keyframes:
        rel = scene.poses[kf.frame_index].inverse() @ kf.pose
        assert rel.rotation_angle() < 1e-3
    assert all(kf.optimized for kf in g.keyframes)


def test_repeated_rejections_raise_and_restore(monkeypatch):
    g, _ = small_sim_graph()
    before = [kf.inv_depth.copy() for kf in g.keyframes]
    poses = [kf.pose for kf in g.keyframes]

    def wild_step(ne):
        return np.full(ne.num_camera, 0.5), np.full(ne.num_depth, 5.0)

    monkeypatch.setattr(solver, "solve_step", wild_step)
    with pytest.raises(DivergedEnergy):
        gauss_newton(g, SolverConfig(max_iters=3))
    for kf, d, p in zip(g.keyframes, before, poses):
        assert np.array_equal(kf.inv_depth, d)
        assert kf.pose.allclose(p, 0.0)
