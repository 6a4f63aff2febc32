"""Dataset directories: writing simulated data and serving it as file-backed providers.

Layout::

    meta.txt             frames, width, height, max_gap, prior_focal
    gt_intrinsics.txt    camera.* keys
    gt_trajectory.txt    TUM
    flows/flow_IIIII_JJJJJ.vpe    grid flow (x, y, weight) for 0 < |i - j| <= max_gap
    priors/prior_IIIII.vpe        grid inverse depth and uncertainty
    masks/mask_IIIII.pgm          full-resolution static mask
    vda/vda_IIIII.vpe             full-resolution affine-invariant video depth
    tracks.txt           pairs i < j with 0 < j - i <= max_gap
    matches.txt          exact correspondences between consecutive frames
    frames/frame_IIIII.pgm        optional renderings
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io, sim
from .errors import FormatError, ProviderFailure
from .geometry import Intrinsics
from .metrics import Trajectory
from .pipeline import Providers
from .residuals import LOWRES_FACTOR, FlowField, TrackSet


@dataclass
class SimSettings:
    frames: int = 100
    width: int = sim.DEFAULT_WIDTH
    height: int = sim.DEFAULT_HEIGHT
    dynamic: bool = False
    palindromic: bool = False
    amplitude: float = 1.2
    yaw: float = 0.25
    flow_noise: float = 0.0
    track_noise: float = 0.0
    track_count: int = 100
    track_on_grid: bool = False
    max_gap: int = 24
    match_count: int = 100
    render_frames: bool = False
    seed: int = 0


def _flow_name(i, j):
    return f"flow_{i:05d}_{j:05d}.vpe"


def required_files(root, frames: int, need_video_depth: bool = True, need_masks: bool = True) -> list:
    """Paths ``cmd_solve`` needs; used to report every missing file before computing."""
    root = Path(root)
    paths = [root / "meta.txt"]
    for i in range(frames):
        paths.append(root / "priors" / f"prior_{i:05d}.vpe")
        if need_masks:
            paths.append(root / "masks" / f"mask_{i:05d}.pgm")
        if need_video_depth:
            paths.append(root / "vda" / f"vda_{i:05d}.vpe")
    for i in range(frames - 1):
        paths.append(root / "flows" / _flow_name(i, i + 1))
    return paths


def write_dataset(out_dir, settings: SimSettings) -> sim.Scene:
    """Simulate a scene and write every provider output; returns the scene."""
    s = settings
    scene = sim.make_scene(
        s.frames, s.seed, s.width, s.height, dynamic=s.dynamic, palindromic=s.palindromic,
        amplitude=s.amplitude, yaw=s.yaw,
    )
    root = io.ensure_dir(out_dir)
    for sub in ("flows", "priors", "masks", "vda"):
        io.ensure_dir(root / sub)
    k = scene.intrinsics
    grid_k = k.scaled(LOWRES_FACTOR)
    prior_focal = float(k.width)
    io.write_key_values(root / "meta.txt", {
        "frames": s.frames,
        "width": float(k.width),
        "height": float(k.height),
        "max_gap": s.max_gap,
        "prior_focal": prior_focal,
    })
    io.write_intrinsics(root / "gt_intrinsics.txt", k)
    io.write_tum(root / "gt_trajectory.txt", Trajectory.from_poses(scene.poses))

    for i in range(s.frames):
        inv, _ = sim.render_depth(scene, i, grid_k)
        # stored for a network that assumed focal ``prior_focal``
        stored = inv * (k.f / prior_focal)
        io.write_tensor(root / "priors" / f"prior_{i:05d}.vpe", np.stack([stored, np.ones_like(stored)], axis=-1))
        _, mask = sim.render_depth(scene, i, k)
        io.write_mask(root / "masks" / f"mask_{i:05d}.pgm", mask)
        io.write_tensor(root / "vda" / f"vda_{i:05d}.vpe", sim.video_depth(scene, i))
        if s.render_frames:
            io.ensure_dir(root / "frames")
            io.write_gray(root / "frames" / f"frame_{i:05d}.pgm", sim.render_image(scene, i))

    pairs = [(i, j) for i in range(s.frames) for j in range(s.frames) if i != j and abs(i - j) <= s.max_gap]
    for i, j in pairs:
        rng = np.random.default_rng([s.seed, 1, i, j])
        ff = sim.induced_flow(scene, i, j, grid_k, s.flow_noise / LOWRES_FACTOR, rng)
        io.write_tensor(root / "flows" / _flow_name(i, j), np.concatenate([ff.flow, ff.weight[..., None]], axis=-1))

    forward = [(i, j) for i, j in pairs if i < j]
    tracks = TrackSet.concatenate(
        sim.sample_tracks(scene, [p], s.track_count, s.track_noise, [s.seed, 2],
                          on_grid=LOWRES_FACTOR if s.track_on_grid else None)
        for p in forward
    ) if forward else TrackSet.empty()
    io.write_tracks(root / "tracks.txt", tracks)
    consecutive = [(i, i + 1) for i in range(s.frames - 1)]
    matches = sim.sample_tracks(scene, consecutive, s.match_count, 0.0, [s.seed, 3]) if consecutive else TrackSet.empty()
    io.write_tracks(root / "matches.txt", matches)
    return scene


class FileProviders:
    """Providers backed by a dataset directory.

    Flows and priors are read on demand; pairs beyond the stored frame gap
    return ``None`` (no edge). Priors scale with the assumed focal length the
    same way the simulator's do.
    """

    scales_with_focal = True

    def __init__(self, root):
        self.root = Path(root)
        meta = io.read_key_values(self.root / "meta.txt")
        try:
            self.num_frames = int(meta["frames"][0])
            self.width = float(meta["width"][0])
            self.height = float(meta["height"][0])
            self.max_gap = int(meta["max_gap"][0])
            self.prior_focal = float(meta["prior_focal"][0])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"incomplete meta ({exc})", self.root / "meta.txt") from exc
        self._tracks: Optional[dict] = None

    def _load_tracks(self):
        if self._tracks is None:
            path = self.root / "tracks.txt"
            self._tracks = io.split_tracks(io.read_tracks(path)) if path.exists() else {}
        return self._tracks

    def flow(self, i, j, ci=0, cj=0) -> Optional[FlowField]:
        path = self.root / "flows" / _flow_name(i, j)
        if not path.exists():
            return None
        a = io.read_tensor(path, squeeze=False).astype(float)
        return FlowField(a[..., :2], a[..., 2])

    def tracks(self, i, j, ci=0, cj=0) -> Optional[TrackSet]:
        table = self._load_tracks()
        if (i, j) in table:
            return table[(i, j)]
        if (j, i) in table:
            t = table[(j, i)]
            return TrackSet(t.frame_j, t.p_j, t.frame_i, t.p_i, t.confidence)
        return None

    def prior(self, frame, intrinsics: Intrinsics, camera=0, full=False):
        path = self.root / "priors" / f"prior_{frame:05d}.vpe"
        if not path.exists():
            raise ProviderFailure(f"missing {path}", frame)
        a = io.read_tensor(path, squeeze=False).astype(float)
        inv = a[..., 0] * (self.prior_focal / intrinsics.f)
        unc = a[..., 1]
        if full:
            # nearest grid sample for every full-resolution pixel
            H, W = int(round(self.height)), int(round(self.width))
            ys = np.minimum(np.rint(np.arange(H) / LOWRES_FACTOR).astype(int), inv.shape[0] - 1)
            xs = np.minimum(np.rint(np.arange(W) / LOWRES_FACTOR).astype(int), inv.shape[1] - 1)
            inv, unc = inv[np.ix_(ys, xs)], unc[np.ix_(ys, xs)]
        return inv, unc

    def mask(self, frame, camera=0, full=False):
        m = io.read_mask(self.root / "masks" / f"mask_{frame:05d}.pgm")
        return m if full else m[::LOWRES_FACTOR, ::LOWRES_FACTOR]

    def video_depth(self, frame, camera=0):
        return io.read_tensor(self.root / "vda" / f"vda_{frame:05d}.vpe").astype(float)

    def bundle(self, tracks: bool = True, mask: bool = True, video_depth: bool = True) -> Providers:
        has_tracks = tracks and (self.root / "tracks.txt").exists()
        return Providers(self, self if has_tracks else None, self, self if mask else None, self if video_depth else None)


class ReversedProviders:
    """Serve another provider set with frame ``n`` mapped to ``num_frames - 1 - n``."""

    def __init__(self, inner, num_frames: int):
        self.inner = inner
        self.n = num_frames
        self.scales_with_focal = getattr(inner, "scales_with_focal", False)

    def _m(self, frame):
        return self.n - 1 - frame

    def flow(self, i, j, ci=0, cj=0):
        return self.inner.flow(self._m(i), self._m(j), ci, cj)

    def tracks(self, i, j, ci=0, cj=0):
        t = self.inner.tracks(self._m(i), self._m(j), ci, cj)
        if t is None:
            return None
        return TrackSet(self._m(t.frame_i), t.p_i, self._m(t.frame_j), t.p_j, t.confidence)

    def prior(self, frame, intrinsics, camera=0, full=False):
        return self.inner.prior(self._m(frame), intrinsics, camera, full)

    def mask(self, frame, camera=0, full=False):
        return self.inner.mask(self._m(frame), camera, full)

    def video_depth(self, frame, camera=0):
        return self.inner.video_depth(self._m(frame), camera)
