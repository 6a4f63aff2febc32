"""Shi-Tomasi corner detection and pyramidal Lucas-Kanade tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NoMotionData
from .residuals import LOWRES_FACTOR, FlowField, TrackSet

TENSOR_WINDOW = 7
GRADIENT_SIGMA = 1.0
KEYFRAME_MOTION = 2.4


@dataclass(frozen=True)
class Corner:
    position: np.ndarray  # (x, y), sub-pixel
    score: float


def structure_tensor_response(image: np.ndarray, window: int = TENSOR_WINDOW, sigma: float = GRADIENT_SIGMA) -> np.ndarray:
    """Smaller eigenvalue of the windowed structure tensor at every pixel."""
    img = np.asarray(image, dtype=float)
    ix = ndimage.gaussian_filter(img, sigma, order=(0, 1), mode="nearest")
    iy = ndimage.gaussian_filter(img, sigma, order=(1, 0), mode="nearest")
    sxx = ndimage.uniform_filter(ix * ix, window, mode="nearest")
    syy = ndimage.uniform_filter(iy * iy, window, mode="nearest")
    sxy = ndimage.uniform_filter(ix * iy, window, mode="nearest")
    tr = 0.5 * (sxx + syy)
    disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    return tr - disc


def refine_corner(ix: np.ndarray, iy: np.ndarray, p: np.ndarray, radius: int = 4, iters: int = 5) -> np.ndarray:
    """Sub-pixel corner as the point most orthogonal to the surrounding gradients.

    Solves ``sum g g^T (q - x) = 0`` over a window around the estimate; the
    result moves at most ``radius`` pixels from the starting pixel.
    """
    h, w = ix.shape
    start = np.asarray(p, dtype=float)
    q = start.copy()
    off = np.arange(-radius, radius + 1)
    for _ in range(iters):
        cx, cy = int(round(q[0])), int(round(q[1]))
        xs = np.clip(cx + off, 0, w - 1)
        ys = np.clip(cy + off, 0, h - 1)
        gx = ix[np.ix_(ys, xs)].ravel()
        gy = iy[np.ix_(ys, xs)].ravel()
        X, Y = np.meshgrid(xs, ys)
        X, Y = X.ravel().astype(float), Y.ravel().astype(float)
        G = np.array([[gx @ gx, gx @ gy], [gx @ gy, gy @ gy]])
        if np.linalg.det(G) <= 1e-12 * max(np.trace(G) ** 2, 1e-300):
            break
        b = np.array([gx * gx @ X + gx * gy @ Y, gx * gy @ X + gy * gy @ Y])
        new = np.linalg.solve(G, b)
        if np.linalg.norm(new - start) > radius:
            break
        done = np.linalg.norm(new - q) < 1e-3
        q = new
        if done:
            break
    return q


def detect_corners(
    image: np.ndarray,
    max_corners: int = 200,
    quality: float = 0.01,
    min_dist: float = 8.0,
    window: int = TENSOR_WINDOW,
    exclude: np.ndarray | None = None,
) -> list[Corner]:
    """Strongest local maxima of the min-eigenvalue response, greedily spaced.

    Only pixels at least half a window from the border are considered.
    ``exclude`` lists existing points whose ``min_dist`` neighbourhoods are
    left empty.
    """
    img = np.asarray(image, dtype=float)
    if img.size == 0:
        raise ValueError("empty image")
    resp = structure_tensor_response(img, window)
    ix = ndimage.gaussian_filter(img, GRADIENT_SIGMA, order=(0, 1), mode="nearest")
    iy = ndimage.gaussian_filter(img, GRADIENT_SIGMA, order=(1, 0), mode="nearest")
    best = float(resp.max())
    if not best > 1e-12:
        return []
    half = window // 2
    border = np.zeros(resp.shape, dtype=bool)
    border[half : resp.shape[0] - half, half : resp.shape[1] - half] = True
    peak = resp == ndimage.maximum_filter(resp, size=3, mode="nearest")
    cand = border & peak & (resp >= quality * best) & (resp > 0)
    ys, xs = np.nonzero(cand)
    scores = resp[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    taken = [np.asarray(p, dtype=float) for p in (exclude if exclude is not None else [])]
    out: list[Corner] = []
    d2 = min_dist * min_dist
    for n in order:
        p = np.array([xs[n], ys[n]], dtype=float)
        if any(((p - q) ** 2).sum() < d2 for q in taken):
            continue
        taken.append(p)
        out.append(Corner(refine_corner(ix, iy, p), float(scores[n])))
        if len(out) >= max_corners:
            break
    return out


class ImagePyramid:
    """Gaussian pyramid; level 0 is the input, each level halves the resolution."""

    def __init__(self, image: np.ndarray, levels: int | None = None):
        img = np.asarray(image, dtype=float)
        if levels is None:
            levels = default_levels(img.shape)
        self.levels = [img]
        for _ in range(1, max(levels, 1)):
            prev = ndimage.gaussian_filter(self.levels[-1], 1.0, mode="nearest")
            self.levels.append(prev[::2, ::2])
        self.gradients = [
            (
                ndimage.gaussian_filter(lv, 0.5, order=(0, 1), mode="nearest"),
                ndimage.gaussian_filter(lv, 0.5, order=(1, 0), mode="nearest"),
            )
            for lv in self.levels
        ]

    def __len__(self) -> int:
        return len(self.levels)


def default_levels(shape) -> int:
    """``floor(log2(min(H, W) / 32))`` extra levels on top of full resolution."""
    extra = int(math.floor(math.log2(max(min(shape) / 32.0, 1.0))))
    return 1 + max(extra, 0)


def _sample(image, x, y):
    return ndimage.map_coordinates(image, [y, x], order=1, mode="nearest")


def _inside(shape, x, y):
    h, w = shape
    return (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)


def _lk_level(prev, grad, nxt, pts, guess, half, iters, alive):
    """One pyramid level of iterative LK for all points at once.

    Window samples outside either image carry zero weight, so clamped border
    values never pose as image structure.
    """
    off = np.arange(-half, half + 1, dtype=float)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    ox, oy = ox.ravel(), oy.ravel()
    px = pts[:, 0:1] + ox
    py = pts[:, 1:2] + oy
    shape = px.shape
    tmpl = _sample(prev, px.ravel(), py.ravel()).reshape(shape)
    gx = _sample(grad[0], px.ravel(), py.ravel()).reshape(shape)
    gy = _sample(grad[1], px.ravel(), py.ravel()).reshape(shape)
    in_prev = _inside(prev.shape, px, py)
    d = guess.copy()
    for _ in range(iters):
        qx = px + d[:, 0:1]
        qy = py + d[:, 1:2]
        wgt = (in_prev & _inside(nxt.shape, qx, qy)).astype(float)
        gxx, gyy, gxy = (wgt * gx * gx).sum(1), (wgt * gy * gy).sum(1), (wgt * gx * gy).sum(1)
        det = gxx * gyy - gxy * gxy
        tr = 0.5 * (gxx + gyy)
        min_eig = (tr - np.sqrt(np.maximum(0.25 * (gxx - gyy) ** 2 + gxy * gxy, 0.0))) / shape[1]
        alive = alive & (min_eig > 1e-4)
        safe = np.where(alive, det, 1.0)
        cur = _sample(nxt, qx.ravel(), qy.ravel()).reshape(shape)
        err = wgt * (tmpl - cur)
        bx, by = (err * gx).sum(1), (err * gy).sum(1)
        step = np.stack([(gyy * bx - gxy * by) / safe, (gxx * by - gxy * bx) / safe], axis=1)
        step[~alive] = 0.0
        d += step
        if np.all(np.abs(step[alive]) < 1e-3):
            break
    return d, alive


def track_lk(
    prev: ImagePyramid,
    nxt: ImagePyramid,
    points: np.ndarray,
    window: int = 21,
    iters: int = 30,
    fb_threshold: float = 1.0,
    check: bool = True,
):
    """Track ``(n, 2)`` points from ``prev`` to ``nxt``; returns ``(points', status)``.

    Status is False when the local structure tensor is near singular, the
    point leaves the image, or the forward-backward round trip misses by more
    than ``fb_threshold`` pixels.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    half = window // 2
    levels = min(len(prev), len(nxt))
    guess = np.zeros((n, 2))
    alive = np.ones(n, dtype=bool)
    for lv in range(levels - 1, -1, -1):
        s = 2.0 ** lv
        d, alive = _lk_level(prev.levels[lv], prev.gradients[lv], nxt.levels[lv], pts / s, guess, half, iters, alive)
        guess = d * 2.0 if lv > 0 else d
    out = pts + guess
    h, w = nxt.levels[0].shape
    alive &= np.all(np.isfinite(out), axis=1)
    alive &= (out[:, 0] >= 0) & (out[:, 0] <= w - 1) & (out[:, 1] >= 0) & (out[:, 1] <= h - 1)
    alive &= np.linalg.norm(guess, axis=1) < window * 2.0 ** (levels - 1)
    if check and np.any(alive):
        back, ok = track_lk(nxt, prev, out, window, iters, check=False)
        alive &= ok & (np.linalg.norm(back - pts, axis=1) <= fb_threshold)
    return out, alive


def motion_magnitude(flow: FlowField | None, tracks: TrackSet | None, scale: float = LOWRES_FACTOR) -> float:
    """Mean of the weighted mean flow length and the mean track displacement.

    Tracks are converted to grid pixels by ``scale``; if one source is empty
    the other is returned alone.
    """
    vals = []
    if flow is not None:
        wsum = float(flow.weight.sum())
        if wsum > 0:
            vals.append(float((flow.weight * np.linalg.norm(flow.flow, axis=-1)).sum() / wsum))
    if tracks is not None and len(tracks):
        vals.append(float(np.linalg.norm(tracks.p_j - tracks.p_i, axis=1).mean() / scale))
    if not vals:
        raise NoMotionData("no flow weight and no tracks")
    return float(np.mean(vals))


class PointTracker:
    """Frame-to-frame track lifecycle with re-detection.

    Corners are re-detected when fewer than ``redetect_ratio * max_corners``
    tracks remain; new corners keep ``min_dist`` away from live tracks.
    Positions are kept per frame so that any two frames can be matched.
    """

    def __init__(self, max_corners: int = 200, quality: float = 0.01, min_dist: float = 8.0, window: int = 21, redetect_ratio: float = 0.7):
        self.max_corners = max_corners
        self.quality = quality
        self.min_dist = min_dist
        self.window = window
        self.redetect_ratio = redetect_ratio
        self.history: dict[int, dict[int, np.ndarray]] = {}
        self._next_id = 0
        self._prev = None

    def _detect(self, image, live):
        pts = [c.position for c in detect_corners(image, self.max_corners - len(live), self.quality, self.min_dist, exclude=list(live.values()))]
        for p in pts:
            live[self._next_id] = p
            self._next_id += 1

    def add_frame(self, frame: int, image: np.ndarray) -> None:
        pyr = ImagePyramid(image)
        live: dict[int, np.ndarray] = {}
        if self._prev is not None:
            prev_frame, prev_pyr = self._prev
            ids = list(self.history[prev_frame])
            if ids:
                pts = np.array([self.history[prev_frame][i] for i in ids])
                new, ok = track_lk(prev_pyr, pyr, pts, self.window)
                live = {i: p for i, p, o in zip(ids, new, ok) if o}
        if len(live) < self.redetect_ratio * self.max_corners:
            self._detect(image, live)
        self.history[frame] = live
        self._prev = (frame, pyr)

    def tracks_between(self, frame_i: int, frame_j: int) -> TrackSet:
        a, b = self.history.get(frame_i, {}), self.history.get(frame_j, {})
        ids = sorted(set(a) & set(b))
        m = len(ids)
        return TrackSet(
            np.full(m, frame_i),
            np.array([a[i] for i in ids]).reshape(m, 2),
            np.full(m, frame_j),
            np.array([b[i] for i in ids]).reshape(m, 2),
            np.ones(m),
        )
