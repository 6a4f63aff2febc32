import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, rot_scale=0.3, trans_scale=0.5):
    from videopose.geometry import Pose

    return Pose.exp(np.concatenate([rng.normal(0, trans_scale, 3), rng.normal(0, rot_scale, 3)]))


def central_difference(fn, x, h=1e-6):
    """Jacobian of ``fn`` at ``x`` by central differences; columns follow ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for n in range(x.size):
        e = np.zeros_like(x)
        e.flat[n] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), floor)


def random_normal_equations(rng, num_keyframes, pixels, with_intrinsics=True):
    """Normal equations of a random sparse least-squares problem with BA structure.

    Each residual row touches one depth, the pose of its keyframe and the pose
    of one other keyframe (plus the intrinsics), so ``H_dd`` is diagonal and
    the camera system has the usual block pattern. Returns the equations and
    the dense Jacobian they came from.
    """
    from videopose.residuals import DepthBlock, NormalEquations

    nk = 1 if with_intrinsics else 0
    nc = 6 * num_keyframes + nk
    nd = num_keyframes * pixels
    rows = []
    for kf in range(num_keyframes):
        others = [o for o in range(num_keyframes) if o != kf]
        partners = rng.choice(others, size=min(2, len(others)), replace=False) if others else []
        for other in partners:
            for p in range(pixels):
                for _ in range(2):
                    row = np.zeros(nc + nd)
                    row[6 * kf : 6 * kf + 6] = rng.normal(size=6)
                    row[6 * other : 6 * other + 6] = rng.normal(size=6)
                    if nk:
                        row[6 * num_keyframes] = rng.normal()
                    row[nc + kf * pixels + p] = rng.normal()
                    rows.append(row)
    J = np.array(rows)
    r = rng.normal(size=len(J))
    H = J.T @ J + 1e-3 * np.eye(nc + nd)
    g = J.T @ r
    blocks = []
    for kf in range(num_keyframes):
        sl = slice(nc + kf * pixels, nc + (kf + 1) * pixels)
        C = H[sl, :nc]
        cols = np.flatnonzero(np.any(C != 0, axis=0))
        blocks.append(DepthBlock(kf, kf * pixels, cols, C[:, cols]))
    sizes = [6] * num_keyframes + ([1] if nk else [])
    ne = NormalEquations(H[:nc, :nc].copy(), g[:nc].copy(), np.diag(H)[nc:].copy(), g[nc:].copy(), blocks, sizes)
    return ne, H, g


def small_sim_graph(with_tracks=False, flow_noise=0.1, pose_jitter=0.01):
    """Three keyframes of a small simulated scene with perturbed poses and depths."""
    from videopose import sim
    from videopose.geometry import Intrinsics
    from videopose.graph import BAGraph, Edge, Keyframe
    from videopose.residuals import LOWRES_FACTOR

    scene = sim.make_scene(24, seed=5, width=128, height=96)
    k = scene.intrinsics
    k0 = Intrinsics.pinhole(k.f * 1.1, k.width, k.height)
    gk = k.scaled(LOWRES_FACTOR)
    frames = [0, 8, 16]
    g = BAGraph(k0)
    rng = np.random.default_rng(0)
    for f in frames:
        prior, m = sim.depth_prior(scene, f, k0, LOWRES_FACTOR)
        jitter = scene.poses[f].retract(rng.normal(0, pose_jitter, 6)) if f else scene.poses[f]
        g.add_keyframe(Keyframe(f, jitter, prior * rng.uniform(0.95, 1.05, prior.shape), prior.copy(), m, None))
    for a in range(3):
        for b in range(3):
            if a != b:
                flow = sim.induced_flow(scene, frames[a], frames[b], gk, flow_noise, rng)
                tracks = sim.sample_tracks(scene, [(frames[a], frames[b])], 30, 0.5, 1) if with_tracks else None
                g.add_edge(Edge(a, b, flow, tracks))
    return g, frames
