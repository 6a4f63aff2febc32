"""On-disk formats: binary tensors, PGM masks, track text, TUM trajectories, key = value configs.

Every reader raises :class:`FormatError` carrying the path and, for text
formats, the 1-based line number of the offending line.
"""

from __future__ import annotations

import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import PINHOLE, UNIFIED, Intrinsics, Pose
from .metrics import Trajectory
from .residuals import TrackSet

TENSOR_MAGIC = b"VPE1"
_HEADER = struct.Struct("<4sIII")


# --------------------------------------------------------------------------
# Binary tensors
# --------------------------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> None:
    """Write an (h, w) or (h, w, c) array as little-endian float32."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError("tensor must have 2 or 3 dimensions")
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TENSOR_MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(a).astype("<f4").tobytes())


def read_tensor(path, squeeze: bool = True) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`; single-channel tensors come back 2-D."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", path)
    magic, h, w, c = _HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    n = h * w * c
    if len(data) != _HEADER.size + 4 * n:
        raise FormatError(f"payload size {len(data) - _HEADER.size} does not match {h}x{w}x{c}", path)
    a = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)
    if squeeze and c == 1:
        return a[..., 0]
    return a


# --------------------------------------------------------------------------
# Masks (binary PGM, 0 = dynamic, 255 = static)
# --------------------------------------------------------------------------


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.where(m > 0, 255, 0).astype(np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    """Static mask as floats in {0, 1}."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", path)
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM ({fields[0]!r})", path)
    try:
        w, h, maxval = (int(v) for v in fields[1:])
    except ValueError as exc:
        raise FormatError("bad PGM header", path) from exc
    if maxval != 255:
        raise FormatError("only 8-bit PGM masks are supported", path)
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise FormatError("truncated PGM raster", path)
    return (np.frombuffer(raster, dtype=np.uint8).reshape(h, w) > 127).astype(float)


def write_gray(path, image: np.ndarray) -> None:
    """8-bit PGM of an image with values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# --------------------------------------------------------------------------
# Tracks: ``frame_i u_i v_i frame_j u_j v_j conf`` per line
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_tracks(path, tracks: TrackSet) -> None:
    with open(path, "w") as fh:
        fh.write("# frame_i u_i v_i frame_j u_j v_j conf\n")
        for n in range(len(tracks)):
            fh.write(
                f"{int(tracks.frame_i[n])} {_fmt(tracks.p_i[n, 0])} {_fmt(tracks.p_i[n, 1])} "
                f"{int(tracks.frame_j[n])} {_fmt(tracks.p_j[n, 0])} {_fmt(tracks.p_j[n, 1])} {_fmt(tracks.confidence[n])}\n"
            )


def read_tracks(path) -> TrackSet:
    fi, pi, fj, pj, conf = [], [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 7:
                raise FormatError(f"expected 7 fields, got {len(parts)}", path, lineno)
            try:
                a, b = int(parts[0]), int(parts[3])
                vals = [float(parts[k]) for k in (1, 2, 4, 5, 6)]
            except ValueError as exc:
                raise FormatError(f"unparsable value ({exc})", path, lineno) from exc
            if not all(math.isfinite(v) for v in vals):
                raise FormatError("non-finite value", path, lineno)
            fi.append(a)
            fj.append(b)
            pi.append(vals[0:2])
            pj.append(vals[2:4])
            conf.append(vals[4])
    n = len(fi)
    return TrackSet(np.array(fi), np.array(pi).reshape(n, 2), np.array(fj), np.array(pj).reshape(n, 2), np.array(conf))


def split_tracks(tracks: TrackSet) -> dict:
    """Group a track set by ``(frame_i, frame_j)``."""
    out = {}
    keys = np.stack([tracks.frame_i, tracks.frame_j], axis=1) if len(tracks) else np.zeros((0, 2), int)
    for key in sorted({(int(a), int(b)) for a, b in keys}):
        sel = (tracks.frame_i == key[0]) & (tracks.frame_j == key[1])
        out[key] = TrackSet(tracks.frame_i[sel], tracks.p_i[sel], tracks.frame_j[sel], tracks.p_j[sel], tracks.confidence[sel])
    return out


# --------------------------------------------------------------------------
# TUM trajectories: ``timestamp tx ty tz qx qy qz qw``
# --------------------------------------------------------------------------


def write_tum(path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, p in zip(traj.timestamps, traj.poses):
            w, x, y, z = p.q
            vals = [ts, *p.t, x, y, z, w]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_tum(path) -> Trajectory:
    stamps, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 8:
                raise FormatError(f"expected 8 fields, got {len(parts)}", path, lineno)
            try:
                v = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"unparsable value ({exc})", path, lineno) from exc
            if not all(math.isfinite(x) for x in v):
                raise FormatError("non-finite value", path, lineno)
            try:
                poses.append(Pose(np.array([v[7], v[4], v[5], v[6]]), v[1:4]))
            except ValueError as exc:
                raise FormatError(str(exc), path, lineno) from exc
            stamps.append(v[0])
    try:
        return Trajectory(np.array(stamps), poses)
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc


# --------------------------------------------------------------------------
# key = value text
# --------------------------------------------------------------------------


def parse_key_values(text: str, path=None) -> dict:
    """``key = value`` lines with ``#`` comments; returns ``{key: (value, line)}``.

    Duplicate keys and lines without ``=`` are errors.
    """
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise FormatError("expected 'key = value'", path, lineno)
        key, value = (p.strip() for p in s.split("=", 1))
        if not key:
            raise FormatError("empty key", path, lineno)
        if key in out:
            raise FormatError(f"duplicate key {key!r}", path, lineno)
        out[key] = (value, lineno)
    return out


def read_key_values(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read ({exc.strerror})", path) from exc
    return parse_key_values(text, path)


def write_key_values(path, values: dict) -> None:
    with open(path, "w") as fh:
        for key, value in values.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = f"{value:.17g}"
            elif isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")


def intrinsics_values(k: Intrinsics) -> dict:
    return {
        "camera.model": k.model,
        "camera.f": float(k.f),
        "camera.alpha": float(k.alpha),
        "camera.width": float(k.width),
        "camera.height": float(k.height),
    }


def write_intrinsics(path, k: Intrinsics) -> None:
    write_key_values(path, intrinsics_values(k))


def read_intrinsics(path) -> Intrinsics:
    kv = read_key_values(path)
    known = {"camera.model", "camera.f", "camera.alpha", "camera.width", "camera.height"}
    for key, (_, line) in kv.items():
        if key not in known:
            raise FormatError(f"unknown key {key!r}", path, line)
    try:
        model = kv.get("camera.model", (PINHOLE, 0))[0]
        f = float(kv["camera.f"][0])
        w = float(kv["camera.width"][0])
        h = float(kv["camera.height"][0])
        alpha = float(kv.get("camera.alpha", ("0", 0))[0])
    except KeyError as exc:
        raise FormatError(f"missing key {exc.args[0]!r}", path) from exc
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc
    try:
        if model == UNIFIED:
            return Intrinsics.unified(f, alpha, w, h)
        if model == PINHOLE:
            return Intrinsics.pinhole(f, w, h)
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc
    raise FormatError(f"unknown camera model {model!r}", path, kv["camera.model"][1])


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
