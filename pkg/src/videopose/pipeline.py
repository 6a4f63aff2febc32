"""Video-level orchestration: keyframe selection, frontend and backend solves,
pose infilling for non-keyframes and high-resolution depth alignment."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from . import depth_align
from .errors import DivergedEnergy, MissingResolution, NoMotionData, ProviderFailure, VideoPoseError
from .geometry import PINHOLE, UNIFIED, Intrinsics, Pose, interpolate
from .graph import BAGraph, Keyframe, build_frontend_window, build_infill_graph
from .residuals import LOWRES_FACTOR, FlowField, TermSwitches, TrackSet, VariableLayout, assemble_energy
from .solver import SolverConfig, gauss_newton
from .tracker import KEYFRAME_MOTION, motion_magnitude

logger = logging.getLogger(__name__)

DEFAULT_FOV_DEG = 60.0


# --------------------------------------------------------------------------
# Providers
# --------------------------------------------------------------------------


class FlowProvider(Protocol):
    def flow(self, frame_i: int, frame_j: int, camera_i: int = 0, camera_j: int = 0) -> Optional[FlowField]:
        """Grid-resolution flow from frame i to frame j, or None when unavailable."""


class TrackProvider(Protocol):
    def tracks(self, frame_i: int, frame_j: int, camera_i: int = 0, camera_j: int = 0) -> Optional[TrackSet]:
        """Full-resolution point matches from frame i to frame j."""


class DepthPriorProvider(Protocol):
    scales_with_focal: bool

    def prior(self, frame: int, intrinsics: Intrinsics, camera: int = 0, full: bool = False):
        """``(inverse depth, uncertainty)`` on the BA grid, or at full resolution."""


class MaskProvider(Protocol):
    def mask(self, frame: int, camera: int = 0, full: bool = False) -> np.ndarray:
        """Static mask: 1 on static pixels, 0 on dynamic ones."""


class VideoDepthProvider(Protocol):
    def video_depth(self, frame: int, camera: int = 0) -> np.ndarray:
        """Full-resolution affine-invariant depth."""


@dataclass
class Providers:
    flow: FlowProvider
    tracks: Optional[TrackProvider] = None
    prior: Optional[DepthPriorProvider] = None
    mask: Optional[MaskProvider] = None
    video_depth: Optional[VideoDepthProvider] = None
    infiller: depth_align.Infiller = depth_align.identity_infiller


def _call(frame, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ProviderFailure as exc:
        if exc.frame is None:
            raise ProviderFailure(str(exc), frame) from exc
        raise
    except VideoPoseError:
        raise
    except Exception as exc:  # provider bugs and IO errors surface with the frame index
        raise ProviderFailure(f"{type(exc).__name__}: {exc}", frame) from exc


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    keyframe_motion: float = KEYFRAME_MOTION
    window_size: int = 8
    covis_threshold: float = 0.5
    cross_covis_threshold: float = 0.3
    temporal_radius: int = 3
    max_loop_edges: int = 2
    backend_counts: tuple = (8, 16, 64)
    frontend_iters: int = 10
    backend_iters: int = 16
    infill_iters: int = 10
    alpha_reg: float = 0.05
    huber_delta: Optional[float] = None
    switches: TermSwitches = TermSwitches()
    optimize_intrinsics: bool = True
    refresh_rounds: int = 3
    refresh_tolerance: float = 1e-7
    infill: bool = True
    hd_depth: bool = False
    momentum: float = depth_align.MOMENTUM
    tau_px: float = depth_align.TAU_PX
    tau_rel: float = depth_align.TAU_REL
    tau_lo: float = depth_align.TAU_LO
    tau_hi: float = depth_align.TAU_HI


def init_intrinsics(
    width: Optional[float],
    height: Optional[float],
    model: Optional[str] = None,
    f: Optional[float] = None,
    alpha: Optional[float] = None,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> Intrinsics:
    """Configured intrinsics, or a pinhole camera with a ``fov_deg`` horizontal field of view."""
    if width is None or height is None:
        raise MissingResolution("image width and height are required")
    model = model or PINHOLE
    if f is None:
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    if model == UNIFIED:
        return Intrinsics.unified(f, 0.0 if alpha is None else alpha, width, height)
    if model != PINHOLE:
        raise ValueError(f"unknown camera model {model!r}")
    return Intrinsics.pinhole(f, width, height)


def rescale_prior(inv_depth: np.ndarray, f_old: float, f_new: float) -> np.ndarray:
    """Inverse-depth prior of a network whose metric depth scales with the assumed focal."""
    return inv_depth * (f_old / f_new)


# --------------------------------------------------------------------------
# Session
# --------------------------------------------------------------------------


@dataclass
class Report:
    keyframes: list = field(default_factory=list)
    backend_triggers: list = field(default_factory=list)
    final_energy: float = float("nan")
    runtime: float = 0.0
    flagged: list = field(default_factory=list)
    diverged: int = 0


class VideoSession:
    """State of one video run.

    ``rig`` lists per-camera extrinsics relative to the rig pose; camera 0
    drives keyframe selection. Output poses are rig poses, one per frame.
    """

    def __init__(
        self,
        num_frames: int,
        intrinsics: Intrinsics,
        providers: Providers,
        config: PipelineConfig = PipelineConfig(),
        rig: Optional[list] = None,
    ):
        self.num_frames = num_frames
        self.providers = providers
        self.config = config
        self.graph = BAGraph(intrinsics, rig)
        self.num_cameras = len(self.graph.rig)
        self.keyframe_frames: list[int] = []
        self.poses: dict[int, Pose] = {}
        self.report = Report()
        self._backend_done: set = set()

    # -- helpers -----------------------------------------------------------

    @property
    def intrinsics(self) -> Intrinsics:
        return self.graph.intrinsics

    def _edge_data(self, a: Keyframe, b: Keyframe):
        sw = self.config.switches
        flow = _call(b.frame_index, self.providers.flow.flow, a.frame_index, b.frame_index, a.camera, b.camera) if sw.dense else None
        tracks = None
        if sw.sparse and self.providers.tracks is not None:
            tracks = _call(b.frame_index, self.providers.tracks.tracks, a.frame_index, b.frame_index, a.camera, b.camera)
            if tracks is not None and len(tracks) == 0:
                tracks = None
        if flow is None and tracks is None:
            return None
        return flow, tracks

    def _prior(self, frame, camera):
        if self.providers.prior is None:
            return None, None
        inv, m = _call(frame, self.providers.prior.prior, frame, self.intrinsics, camera)
        return np.asarray(inv, dtype=float), np.asarray(m, dtype=float)

    def _mask(self, frame, camera, full=False):
        if self.providers.mask is None:
            return None
        return _call(frame, self.providers.mask.mask, frame, camera, full)

    def _new_pose(self, frame):
        kfs = self.keyframe_frames
        if not kfs:
            return Pose.identity()
        a = self.poses[kfs[-1]]
        if len(kfs) == 1:
            return a
        fa, fb = kfs[-2], kfs[-1]
        return interpolate(self.poses[fa], a, (frame - fa) / (fb - fa))

    def _sync_poses(self):
        for kf in self.graph.keyframes:
            self.poses[kf.frame_index] = kf.pose

    def _solve(self, layout, max_iters, edges=None, optimize_intrinsics=False):
        cfg = SolverConfig(
            max_iters=max_iters,
            optimize_intrinsics=optimize_intrinsics,
            alpha_reg=self.config.alpha_reg,
            huber_delta=self.config.huber_delta,
        )
        try:
            res = gauss_newton(self.graph, cfg, layout, self.config.switches, edges)
            self.report.final_energy = res.final_energy
            return res
        except DivergedEnergy as exc:
            logger.warning("solve stopped: %s", exc)
            self.report.diverged += 1
            return None

    # -- stages ------------------------------------------------------------

    def _add_keyframe(self, frame):
        pose = self._new_pose(frame)
        ids = []
        for cam in range(self.num_cameras):
            inv, m = self._prior(frame, cam)
            if inv is None:
                h, w = self.graph.grid_shape
                depth = np.ones((h, w))
            else:
                depth = np.clip(np.where(inv > 0, inv, 1.0), 1e-4, 1e4)
            mask = self._mask(frame, cam)
            kf = Keyframe(frame, pose, depth.copy(), inv, m, mask, camera=cam)
            ids.append(self.graph.add_keyframe(kf))
        self.keyframe_frames.append(frame)
        self.poses[frame] = pose
        return ids

    def process_frame(self, frame: int) -> str:
        """Keyframe decision for one frame; returns ``"keyframe_added"`` or ``"skipped"``."""
        if not self.keyframe_frames:
            self._add_keyframe(frame)
            self.report.keyframes.append(frame)
            return "keyframe_added"
        last = self.keyframe_frames[-1]
        flow = _call(frame, self.providers.flow.flow, last, frame, 0, 0)
        tracks = None
        if self.providers.tracks is not None:
            tracks = _call(frame, self.providers.tracks.tracks, last, frame, 0, 0)
        try:
            motion = motion_magnitude(flow, tracks)
        except NoMotionData as exc:
            raise ProviderFailure(str(exc), frame) from exc
        if motion <= self.config.keyframe_motion:
            return "skipped"
        ids = self._add_keyframe(frame)
        self.report.keyframes.append(frame)
        self._frontend(ids)
        self.maybe_backend()
        return "keyframe_added"

    def _frontend(self, new_ids):
        cfg = self.config
        added = []
        for i in new_ids:
            added += build_frontend_window(
                self.graph, i, cfg.window_size, cfg.covis_threshold, self._edge_data,
                cfg.temporal_radius, cfg.cross_covis_threshold, cfg.max_loop_edges,
            )
        window = self.keyframe_frames[-cfg.window_size :]
        if len(window) < 2:
            return
        wset = set(window)
        new_frame = self.graph.keyframes[new_ids[0]].frame_index
        loop_frames = {
            self.graph.keyframes[e.src].frame_index
            for (s, d), e in self.graph.edges.items()
            if e.kind == "loop" and self.graph.keyframes[d].frame_index == new_frame
        }
        active = wset | loop_frames
        edges = [
            key for key in self.graph.edges
            if self.graph.keyframes[key[0]].frame_index in active and self.graph.keyframes[key[1]].frame_index in active
        ]
        if not edges:
            return
        free_poses = [f for f in window[1:]]
        free_depths = [i for i, kf in enumerate(self.graph.keyframes) if kf.frame_index in wset]
        layout = VariableLayout(free_poses, free_depths, False, self.intrinsics.num_params)
        self._solve(layout, cfg.frontend_iters, edges)
        self._sync_poses()

    def maybe_backend(self, final: bool = False) -> bool:
        """Full-graph solve at the scheduled keyframe counts and at the end."""
        n = len(self.keyframe_frames)
        due = n in self.config.backend_counts or final
        if not due or n in self._backend_done or n < 2 or not self.graph.edges:
            return False
        self._backend_done.add(n)
        self.report.backend_triggers.append(n)
        self.backend()
        return True

    def backend(self):
        cfg = self.config
        frames = self.keyframe_frames
        depths = [i for i, kf in enumerate(self.graph.keyframes) if kf.inv_depth is not None]
        layout = VariableLayout(frames[1:], depths, cfg.optimize_intrinsics, self.intrinsics.num_params)
        rounds = cfg.refresh_rounds if cfg.optimize_intrinsics else 1
        for _ in range(max(rounds, 1)):
            f_old = self.intrinsics.f
            self._solve(layout, cfg.backend_iters, optimize_intrinsics=cfg.optimize_intrinsics)
            self._sync_poses()
            f_new = self.intrinsics.f
            self.refresh_priors(f_old, f_new)
            if abs(f_new - f_old) <= cfg.refresh_tolerance * f_old:
                break

    def refresh_priors(self, f_old: float, f_new: float):
        """Update depth priors after a focal change (a rescale for focal-conditioned priors)."""
        p = self.providers.prior
        if p is None or f_old == f_new or not getattr(p, "scales_with_focal", False):
            return
        for kf in self.graph.keyframes:
            if kf.prior_inv_depth is not None:
                kf.prior_inv_depth = rescale_prior(kf.prior_inv_depth, f_old, f_new)
        # Flow residuals are invariant to a global scale of the map, so move
        # the map to the refreshed prior's scale instead of letting the solver
        # crawl along that weakly constrained direction.
        if all(np.allclose(T.t, 0.0) for T in self.graph.rig):
            c = f_old / f_new
            for kf in self.graph.keyframes:
                if kf.inv_depth is not None:
                    kf.inv_depth = np.clip(kf.inv_depth * c, 1e-4, 1e4)
            for frame in self.poses:
                p = self.poses[frame]
                self.poses[frame] = Pose(p.q, p.t / c)
            for kf in self.graph.keyframes:
                kf.pose = self.poses[kf.frame_index]

    def infill_all(self) -> None:
        """Pose every non-keyframe against its two nearest keyframes."""
        keyset = set(self.keyframe_frames)
        for frame in range(self.num_frames):
            if frame in keyset:
                continue
            self.poses[frame] = self._infill_one(frame)

    def _fallback(self, frame):
        times = self.keyframe_frames
        prev = [f for f in times if f < frame]
        nxt = [f for f in times if f > frame]
        if prev and nxt:
            a, b = prev[-1], nxt[0]
        elif len(times) >= 2:
            a, b = (times[-2], times[-1]) if not nxt else (times[0], times[1])
        else:
            return self.poses[times[0]]
        return interpolate(self.poses[a], self.poses[b], (frame - a) / (b - a))

    def _infill_one(self, frame):
        try:
            prob = build_infill_graph(self.graph, frame, self._edge_data)
            if not prob.graph.edges:
                raise ProviderFailure("no measurements", frame)
            layout = VariableLayout([frame], [], False, self.intrinsics.num_params)
            cfg = SolverConfig(max_iters=self.config.infill_iters, alpha_reg=self.config.alpha_reg, huber_delta=self.config.huber_delta)
            gauss_newton(prob.graph, cfg, layout, self.config.switches)
            pose = prob.graph.keyframes[prob.free_vertex].pose
            if not np.all(np.isfinite(pose.t)):
                raise DivergedEnergy("non-finite pose")
            return pose
        except VideoPoseError as exc:
            logger.warning("infill of frame %d fell back to interpolation: %s", frame, exc)
            self.report.flagged.append(frame)
            return self._fallback(frame)

    def run(self) -> list:
        """Process every frame, run the final backend and infill; returns rig poses in frame order."""
        t0 = time.perf_counter()
        for frame in range(self.num_frames):
            self.process_frame(frame)
        self.maybe_backend(final=True)
        if self.config.infill:
            self.infill_all()
        else:
            for frame in range(self.num_frames):
                if frame not in self.poses:
                    self.poses[frame] = self._fallback(frame)
                    self.report.flagged.append(frame)
        self.report.runtime = time.perf_counter() - t0
        return self.trajectory()

    def trajectory(self) -> list:
        return [self.poses[f] for f in range(self.num_frames)]

    def energy(self) -> float:
        return assemble_energy(self.graph, self.config.switches, alpha_reg=self.config.alpha_reg)[0].total

    # -- high-resolution depth -----------------------------------------------

    def hd_depths(self, camera: int = 0) -> list:
        """Aligned full-resolution depth for every frame of one camera."""
        if self.providers.video_depth is None:
            raise ProviderFailure("no video depth provider")
        cfg = self.config
        k = self.intrinsics
        ids = [i for i, kf in enumerate(self.graph.keyframes) if kf.camera == camera]
        points = depth_align.consistent_points(self.graph, cfg.tau_px, cfg.tau_rel, ids)
        targets, vdas, masks = [], [], []
        for frame in range(self.num_frames):
            pose = self.poses[frame] @ self.graph.rig[camera]
            sparse = depth_align.splat_points(points, pose, k)
            prior = None
            if self.providers.prior is not None:
                prior, _ = _call(frame, self.providers.prior.prior, frame, k, camera, True)
            targets.append(depth_align.coverage_gate(sparse, prior, self.providers.infiller, frame, cfg.tau_lo, cfg.tau_hi))
            vdas.append(_call(frame, self.providers.video_depth.video_depth, frame, camera))
            masks.append(self._mask(frame, camera, full=True) if cfg.switches.mask else None)
        return depth_align.align_sequence(list(range(self.num_frames)), targets, vdas, masks, cfg.momentum)


def run_rig(
    num_frames: int,
    intrinsics: Intrinsics,
    providers: Providers,
    rig: list,
    config: PipelineConfig = PipelineConfig(),
) -> VideoSession:
    """Run a multi-camera rig with fixed extrinsics; returns the finished session."""
    session = VideoSession(num_frames, intrinsics, providers, config, rig)
    session.run()
    return session


# --------------------------------------------------------------------------
# Simulator-backed providers
# --------------------------------------------------------------------------


class SimProviders:
    """Flow, tracks, priors, masks and video depth straight from a synthetic scene.

    Noise levels are standard deviations in full-resolution pixels for both
    flow and tracks. Per-pair noise uses generators seeded by
    ``(seed, i, j, cameras)`` so the same request always returns the same data.
    """

    scales_with_focal = True

    def __init__(
        self,
        scene,
        flow_noise: float = 0.0,
        track_noise: float = 0.0,
        track_count: int = 200,
        seed: int = 0,
        rig: Optional[list] = None,
        vda_scale: float = 2.0,
        vda_shift: float = 0.3,
        track_on_grid: bool = False,
    ):
        from . import sim

        self._sim = sim
        self.scene = scene
        self.flow_noise = flow_noise
        self.track_noise = track_noise
        self.track_count = track_count
        self.seed = seed
        self.rig = list(rig) if rig is not None else [Pose.identity()]
        self.vda_scale = vda_scale
        self.vda_shift = vda_shift
        self.track_on_grid = track_on_grid
        self._grid_k = scene.intrinsics.scaled(LOWRES_FACTOR)

    def _view(self, camera):
        return None if camera == 0 and len(self.rig) == 1 else self.rig[camera]

    def flow(self, i, j, ci=0, cj=0):
        rng = np.random.default_rng([self.seed, 1, i, j, ci, cj])
        noise = self.flow_noise / LOWRES_FACTOR
        return self._sim.induced_flow(self.scene, i, j, self._grid_k, noise, rng, self._view(ci), self._view(cj))

    def tracks(self, i, j, ci=0, cj=0):
        seed = [self.seed, 2, ci, cj]
        return self._sim.sample_tracks(
            self.scene, [(i, j)], self.track_count, self.track_noise, seed,
            on_grid=LOWRES_FACTOR if self.track_on_grid else None, view_i=self._view(ci), view_j=self._view(cj),
        )

    def prior(self, frame, intrinsics, camera=0, full=False):
        return self._sim.depth_prior(self.scene, frame, intrinsics, 1 if full else LOWRES_FACTOR, self._view(camera))

    def mask(self, frame, camera=0, full=False):
        k = self.scene.intrinsics if full else self._grid_k
        return self._sim.render_depth(self.scene, frame, k, self._view(camera))[1]

    def video_depth(self, frame, camera=0):
        return self._sim.video_depth(self.scene, frame, self.vda_scale, self.vda_shift, self._view(camera))

    def bundle(self, tracks: bool = True, mask: bool = True) -> Providers:
        return Providers(self, self if tracks else None, self, self if mask else None, self)


@dataclass
class SimVideo:
    """A synthetic video and its provider settings; ``reversed()`` plays it backwards."""

    scene: object
    flow_noise: float = 0.0
    track_noise: float = 0.0
    track_count: int = 200
    seed: int = 0
    track_on_grid: bool = False

    def reversed(self) -> "SimVideo":
        return SimVideo(self.scene.reversed(), self.flow_noise, self.track_noise, self.track_count, self.seed, self.track_on_grid)

    def providers(self, tracks: bool = True, mask: bool = True) -> Providers:
        p = SimProviders(self.scene, self.flow_noise, self.track_noise, self.track_count, self.seed, track_on_grid=self.track_on_grid)
        return p.bundle(tracks, mask)
