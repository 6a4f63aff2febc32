"""Command-line entry point: simulate, solve, eval, shuttle, sampson.

Results are printed as ``metric=value`` lines. Any package error exits with
status 2 after printing a single ``error=<ClassName> <message>`` line.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .dataset import FileProviders, ReversedProviders, SimSettings, required_files, write_dataset
from .errors import ConfigError, FormatError, MissingInputs, VideoPoseError
from .geometry import PINHOLE, UNIFIED
from .metrics import Trajectory, ate, focal_error, rre, rte, sampson_error, shuttle_eval
from .pipeline import PipelineConfig, VideoSession, init_intrinsics
from .residuals import TermSwitches


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _opt_float(s: str):
    return None if s.strip().lower() == "none" else float(s)


def _model(s: str) -> str:
    if s not in (PINHOLE, UNIFIED):
        raise ValueError(f"unknown camera model {s!r}")
    return s


def _positive(x):
    return x is None or x > 0


def _unit(x):
    return 0.0 <= x <= 1.0


# key -> (parser, default, validity check)
SCHEMA = {
    "camera.model": (_model, PINHOLE, None),
    "camera.f": (_opt_float, None, _positive),
    "camera.alpha": (float, 0.0, lambda a: 0.0 <= a < 1.0),
    "camera.width": (_opt_float, None, _positive),
    "camera.height": (_opt_float, None, _positive),
    "camera.fov": (float, 60.0, lambda a: 0.0 < a < 180.0),
    "keyframe.motion": (float, PipelineConfig.keyframe_motion, lambda a: a > 0),
    "graph.window": (int, PipelineConfig.window_size, lambda a: a >= 2),
    "graph.covis": (float, PipelineConfig.covis_threshold, _unit),
    "graph.cross_covis": (float, PipelineConfig.cross_covis_threshold, _unit),
    "graph.temporal_radius": (int, PipelineConfig.temporal_radius, lambda a: a >= 1),
    "graph.max_loop_edges": (int, PipelineConfig.max_loop_edges, lambda a: a >= 0),
    "solver.frontend_iters": (int, PipelineConfig.frontend_iters, lambda a: a >= 1),
    "solver.backend_iters": (int, PipelineConfig.backend_iters, lambda a: a >= 1),
    "solver.infill_iters": (int, PipelineConfig.infill_iters, lambda a: a >= 1),
    "solver.backend_counts": (_ints, PipelineConfig.backend_counts, lambda a: all(v >= 2 for v in a)),
    "solver.alpha_reg": (float, PipelineConfig.alpha_reg, lambda a: a >= 0),
    "solver.huber_delta": (_opt_float, None, _positive),
    "solver.optimize_intrinsics": (_bool, True, None),
    "solver.refresh_rounds": (int, PipelineConfig.refresh_rounds, lambda a: a >= 1),
    "terms.dense": (_bool, True, None),
    "terms.sparse": (_bool, True, None),
    "terms.depth_reg": (_bool, True, None),
    "terms.mask": (_bool, True, None),
    "depth.hd": (_bool, True, None),
    "depth.momentum": (float, PipelineConfig.momentum, lambda a: 0.0 <= a < 1.0),
    "depth.tau_px": (float, PipelineConfig.tau_px, lambda a: a > 0),
    "depth.tau_rel": (float, PipelineConfig.tau_rel, lambda a: a > 0),
    "depth.tau_lo": (float, PipelineConfig.tau_lo, _unit),
    "depth.tau_hi": (float, PipelineConfig.tau_hi, _unit),
    "eval.delta": (int, 1, lambda a: a >= 1),
    "seed": (int, 0, lambda a: a >= 0),
}
_SIM_TYPES = {bool: _bool, int: int, float: float}
for _f in fields(SimSettings):
    if _f.name != "seed":
        SCHEMA[f"sim.{_f.name}"] = (_SIM_TYPES[type(_f.default)], _f.default, None)


class RunConfig:
    """Validated ``key = value`` configuration; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self.values = {k: spec[1] for k, spec in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value, path=None, line=None):
        if key not in SCHEMA:
            raise ConfigError(_where(path, line) + f"unknown key {key!r}")
        parse, _, check = SCHEMA[key]
        try:
            v = parse(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(_where(path, line) + f"{key}: {exc}") from exc
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(_where(path, line) + f"{key}: value must be finite")
        if check is not None and not check(v):
            raise ConfigError(_where(path, line) + f"{key}: invalid value {value!r}")
        self.values[key] = v

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str, path=None) -> "RunConfig":
        cfg = cls()
        try:
            kv = io.parse_key_values(text, path)
        except FormatError as exc:
            raise ConfigError(str(exc)) from exc
        for key, (value, line) in kv.items():
            cfg.set(key, value, path, line)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
        return cls.from_text(text, path)

    def validate(self):
        if self["depth.tau_lo"] > self["depth.tau_hi"]:
            raise ConfigError("depth.tau_lo must not exceed depth.tau_hi")
        if self["camera.model"] == PINHOLE and self["camera.alpha"] != 0.0:
            raise ConfigError("camera.alpha requires camera.model = unified")

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            keyframe_motion=self["keyframe.motion"],
            window_size=self["graph.window"],
            covis_threshold=self["graph.covis"],
            cross_covis_threshold=self["graph.cross_covis"],
            temporal_radius=self["graph.temporal_radius"],
            max_loop_edges=self["graph.max_loop_edges"],
            backend_counts=tuple(self["solver.backend_counts"]),
            frontend_iters=self["solver.frontend_iters"],
            backend_iters=self["solver.backend_iters"],
            infill_iters=self["solver.infill_iters"],
            alpha_reg=self["solver.alpha_reg"],
            huber_delta=self["solver.huber_delta"],
            switches=TermSwitches(self["terms.dense"], self["terms.sparse"], self["terms.depth_reg"], self["terms.mask"]),
            optimize_intrinsics=self["solver.optimize_intrinsics"],
            refresh_rounds=self["solver.refresh_rounds"],
            hd_depth=self["depth.hd"],
            momentum=self["depth.momentum"],
            tau_px=self["depth.tau_px"],
            tau_rel=self["depth.tau_rel"],
            tau_lo=self["depth.tau_lo"],
            tau_hi=self["depth.tau_hi"],
        )

    def sim_settings(self) -> SimSettings:
        kw = {f.name: self[f"sim.{f.name}"] for f in fields(SimSettings) if f.name != "seed"}
        return SimSettings(seed=self["seed"], **kw)

    def initial_intrinsics(self, width, height):
        w = self["camera.width"] if self["camera.width"] is not None else width
        h = self["camera.height"] if self["camera.height"] is not None else height
        alpha = self["camera.alpha"] if self["camera.model"] == UNIFIED else None
        return init_intrinsics(w, h, self["camera.model"], self["camera.f"], alpha, self["camera.fov"])


def _where(path, line):
    if path is None:
        return ""
    return f"{path}:{line}: " if line is not None else f"{path}: "


def _config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _apply_flags(cfg: RunConfig, args) -> None:
    for flag, key in (("no_dense", "terms.dense"), ("no_sparse", "terms.sparse"), ("no_depth_reg", "terms.depth_reg"), ("no_mask", "terms.mask")):
        if getattr(args, flag, False):
            cfg.set(key, False)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _emit(out, **metrics):
    out = sys.stdout if out is None else out
    for key, value in metrics.items():
        if isinstance(value, float):
            value = f"{value:.10g}"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        print(f"{key}={value}", file=out)


def cmd_simulate(cfg: RunConfig, out_dir, out=None) -> None:
    settings = cfg.sim_settings()
    scene = write_dataset(out_dir, settings)
    gt = Trajectory.from_poses(scene.poses)
    _emit(out, frames=settings.frames, path_length=gt.path_length(), focal=scene.intrinsics.f)


def _session(cfg: RunConfig, providers, num_frames, width, height) -> VideoSession:
    k0 = cfg.initial_intrinsics(width, height)
    return VideoSession(num_frames, k0, providers, cfg.pipeline_config())


def _check_dataset(cfg: RunConfig, dataset) -> FileProviders:
    root = Path(dataset)
    if not (root / "meta.txt").exists():
        raise MissingInputs([root / "meta.txt"])
    files = FileProviders(root)
    need = required_files(root, files.num_frames, need_video_depth=cfg["depth.hd"], need_masks=cfg["terms.mask"])
    if cfg["terms.sparse"]:
        need.append(root / "tracks.txt")
    missing = [p for p in need if not p.exists()]
    if missing:
        raise MissingInputs(missing)
    return files


def _depth_or_nan(inv):
    inv = np.asarray(inv, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(inv > 0, 1.0 / np.where(inv > 0, inv, 1.0), np.nan)


def cmd_solve(cfg: RunConfig, dataset, out_dir, out=None) -> VideoSession:
    files = _check_dataset(cfg, dataset)
    providers = files.bundle(tracks=cfg["terms.sparse"], mask=cfg["terms.mask"], video_depth=cfg["depth.hd"])
    session = _session(cfg, providers, files.num_frames, files.width, files.height)
    poses = session.run()
    root = io.ensure_dir(out_dir)
    io.write_tum(root / "trajectory.txt", Trajectory.from_poses(poses))
    io.write_intrinsics(root / "intrinsics.txt", session.intrinsics)
    kdir = io.ensure_dir(root / "keyframes")
    for kf in session.graph.keyframes:
        io.write_tensor(kdir / f"depth_{kf.frame_index:05d}.vpe", _depth_or_nan(kf.inv_depth))
    if cfg["depth.hd"]:
        hdir = io.ensure_dir(root / "depth")
        for fd in session.hd_depths():
            io.write_tensor(hdir / f"depth_{fd.frame:05d}.vpe", np.where(fd.valid, fd.depth, np.nan))
    r = session.report
    report = {
        "keyframes": len(r.keyframes),
        "keyframe_frames": r.keyframes,
        "backend_triggers": r.backend_triggers,
        "final_energy": float(r.final_energy),
        "runtime": float(r.runtime),
        "diverged": r.diverged,
        "flagged": len(r.flagged),
        "focal": float(session.intrinsics.f),
    }
    io.write_key_values(root / "report.txt", report)
    _emit(out, keyframes=len(r.keyframes), focal=float(session.intrinsics.f), final_energy=float(r.final_energy), runtime=float(r.runtime))
    return session


def cmd_eval(est_path, gt_path, align=True, with_scale=False, delta=1, out=None) -> dict:
    est = io.read_tum(est_path)
    gt = io.read_tum(gt_path)
    est, gt = associate(est, gt)
    res = {
        "ate": ate(est, gt, align, with_scale),
        "rte": rte(est, gt, delta, align, with_scale),
        "rre": rre(est, gt, delta, align, with_scale),
        "path_length": gt.path_length(),
        "poses": len(gt),
    }
    _emit(out, **res)
    return res


def associate(est: Trajectory, ref: Trajectory, tol: float = 1e-6):
    """Pair poses with matching timestamps (within ``tol``)."""
    if len(est) == len(ref) and np.allclose(est.timestamps, ref.timestamps, atol=tol, rtol=0):
        return est, ref
    idx = np.searchsorted(ref.timestamps, est.timestamps)
    a, b = [], []
    for n, (t, i) in enumerate(zip(est.timestamps, idx)):
        for c in (i - 1, i):
            if 0 <= c < len(ref) and abs(ref.timestamps[c] - t) <= tol:
                a.append(n)
                b.append(c)
                break
    if len(a) < 3:
        raise FormatError(f"only {len(a)} poses share timestamps")
    return (
        Trajectory(est.timestamps[a], [est.poses[n] for n in a]),
        Trajectory(ref.timestamps[b], [ref.poses[n] for n in b]),
    )


class _DatasetVideo:
    def __init__(self, cfg: RunConfig, files: FileProviders, reverse: bool = False):
        self.cfg, self.files, self.reverse = cfg, files, reverse

    def reversed(self):
        return _DatasetVideo(self.cfg, self.files, not self.reverse)

    def run(self):
        cfg = self.cfg
        p = self.files.bundle(tracks=cfg["terms.sparse"], mask=cfg["terms.mask"], video_depth=False)
        if self.reverse:
            r = ReversedProviders(self.files, self.files.num_frames)
            p.flow, p.prior = r, r
            p.tracks = r if p.tracks is not None else None
            p.mask = r if p.mask is not None else None
        s = _session(cfg, p, self.files.num_frames, self.files.width, self.files.height)
        return Trajectory.from_poses(s.run()), s.intrinsics


def cmd_shuttle(cfg: RunConfig, dataset, out=None):
    cfg.set("depth.hd", False)
    files = _check_dataset(cfg, dataset)
    res = shuttle_eval(lambda video: video.run(), _DatasetVideo(cfg, files), cfg["eval.delta"])
    _emit(out, s_ate=res.s_ate, s_rte=res.s_rte, s_rre=res.s_rre, s_focal=res.s_focal)
    return res


def cmd_sampson(traj_path, intrinsics_path, matches_path, out=None):
    traj = io.read_tum(traj_path)
    k = io.read_intrinsics(intrinsics_path)
    tracks = io.read_tracks(matches_path)
    corr = {}
    for (i, j), t in io.split_tracks(tracks).items():
        if j == i + 1:
            corr[i] = (t.p_i, t.p_j)
    res = sampson_error(traj, k, corr)
    _emit(out, sampson=res.error, pairs=res.pairs, skipped=res.skipped)
    return res


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="videopose", description="Dense video bundle adjustment on keyframe graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset directory")
    s.add_argument("out_dir")
    s.add_argument("--config")

    s = sub.add_parser("solve", help="estimate poses, intrinsics and depth for a dataset")
    s.add_argument("dataset")
    s.add_argument("out_dir")
    s.add_argument("--config")
    for flag in ("--no-dense", "--no-sparse", "--no-depth-reg", "--no-mask"):
        s.add_argument(flag, action="store_true")

    s = sub.add_parser("eval", help="ATE / RTE / RRE between two TUM trajectories")
    s.add_argument("estimate")
    s.add_argument("reference")
    s.add_argument("--no-align", action="store_true")
    s.add_argument("--scale", action="store_true", help="similarity instead of rigid alignment")
    s.add_argument("--delta", type=int, default=1)

    s = sub.add_parser("shuttle", help="forward/backward self-consistency on a dataset")
    s.add_argument("dataset")
    s.add_argument("--config")
    for flag in ("--no-dense", "--no-sparse", "--no-depth-reg", "--no-mask"):
        s.add_argument(flag, action="store_true")

    s = sub.add_parser("sampson", help="mean Sampson error of a trajectory on matches")
    s.add_argument("trajectory")
    s.add_argument("intrinsics")
    s.add_argument("matches")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cmd_simulate(_config(args.config), args.out_dir)
        elif args.command == "solve":
            cfg = _config(args.config)
            _apply_flags(cfg, args)
            cmd_solve(cfg, args.dataset, args.out_dir)
        elif args.command == "eval":
            cmd_eval(args.estimate, args.reference, not args.no_align, args.scale, args.delta)
        elif args.command == "shuttle":
            cfg = _config(args.config)
            _apply_flags(cfg, args)
            cmd_shuttle(cfg, args.dataset)
        elif args.command == "sampson":
            cmd_sampson(args.trajectory, args.intrinsics, args.matches)
    except VideoPoseError as exc:
        print(f"error={type(exc).__name__} {exc}")
        return 2
    except OSError as exc:
        print(f"error={type(exc).__name__} {exc.filename}: {exc.strerror}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
