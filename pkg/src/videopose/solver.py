"""Damped Gauss-Newton over poses, per-pixel inverse depths and intrinsics.

Each iteration eliminates the (diagonal) depth block with a Schur complement,
factors the reduced camera system with a block-sparse Cholesky after a
minimum-degree reordering, then back-substitutes the depth updates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DivergedEnergy, NotPositiveDefinite, SingularDepthBlock
from .geometry import Pose
from .residuals import (
    DEPTH_MAX,
    DEPTH_MIN,
    Measurements,
    NormalEquations,
    TermSwitches,
    VariableLayout,
    assemble_energy,
)

logger = logging.getLogger(__name__)

SINGULAR_DEPTH = 1e-12


@dataclass
class SolverConfig:
    max_iters: int = 10
    step_tolerance: float = 1e-6
    damping: float = 1e-4
    optimize_intrinsics: bool = False
    gauge: bool = True
    alpha_reg: float = 0.05
    huber_delta: float | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")


# --------------------------------------------------------------------------
# Schur complement
# --------------------------------------------------------------------------


@dataclass
class ReducedSystem:
    S: np.ndarray
    b: np.ndarray
    frozen: np.ndarray  # depth entries excluded from elimination
    block_sizes: list


def schur_eliminate_depth(ne: NormalEquations, strict: bool = False) -> ReducedSystem:
    """Reduce ``[[H_cc, H_cd], [H_dc, H_dd]]`` to the camera unknowns.

    Returns ``S = H_cc - H_cd H_dd^-1 H_dc`` and ``b = g_c - H_cd H_dd^-1 g_d``
    so that ``S dc = -b``. Depth entries with ``H_dd <= 1e-12`` are frozen
    (raise :class:`SingularDepthBlock` instead when ``strict``).
    """
    frozen = ne.H_dd <= SINGULAR_DEPTH
    if strict and np.any(frozen):
        raise SingularDepthBlock(f"{int(frozen.sum())} depth entries have a singular diagonal")
    inv = np.where(frozen, 0.0, 1.0 / np.where(frozen, 1.0, ne.H_dd))
    S = ne.H_cc.copy()
    b = ne.g_c.copy()
    for blk in ne.blocks:
        P = blk.C.shape[0]
        sl = slice(blk.offset, blk.offset + P)
        wC = blk.C * inv[sl, None]
        S[np.ix_(blk.cols, blk.cols)] -= blk.C.T @ wC
        b[blk.cols] -= wC.T @ ne.g_d[sl]
    S = 0.5 * (S + S.T)
    return ReducedSystem(S, b, frozen, list(ne.block_sizes))


def back_substitute(ne: NormalEquations, reduced: ReducedSystem, dc: np.ndarray) -> np.ndarray:
    """Depth step ``dd = -H_dd^-1 (g_d + H_dc dc)``; frozen entries stay at 0."""
    rhs = ne.g_d.copy()
    for blk in ne.blocks:
        P = blk.C.shape[0]
        rhs[blk.offset : blk.offset + P] += blk.C @ dc[blk.cols]
    dd = np.zeros_like(rhs)
    ok = ~reduced.frozen
    dd[ok] = -rhs[ok] / ne.H_dd[ok]
    return dd


# --------------------------------------------------------------------------
# Sparse Cholesky
# --------------------------------------------------------------------------


def _block_offsets(block_sizes):
    return np.concatenate([[0], np.cumsum(block_sizes)]).astype(int)


def block_pattern(S: np.ndarray, block_sizes) -> list[set]:
    """Adjacency of the block graph: blocks i, j are linked when S_ij != 0."""
    off = _block_offsets(block_sizes)
    n = len(block_sizes)
    adj = [set() for _ in range(n)]
    for i in range(n):
        for j in range(i):
            if np.any(S[off[i] : off[i + 1], off[j] : off[j + 1]] != 0):
                adj[i].add(j)
                adj[j].add(i)
    return adj


def minimum_degree_ordering(adjacency: list[set]) -> np.ndarray:
    """Greedy minimum-degree elimination order (ties broken by lowest index)."""
    adj = [set(a) for a in adjacency]
    remaining = set(range(len(adj)))
    order = []
    while remaining:
        v = min(remaining, key=lambda u: (len(adj[u]), u))
        nbrs = adj[v]
        for a in nbrs:
            adj[a] |= nbrs
            adj[a].discard(a)
            adj[a].discard(v)
        remaining.discard(v)
        adj[v] = set()
        order.append(v)
    return np.array(order, dtype=int)


class BlockCholesky:
    """Right-looking block Cholesky ``P S P^T = L L^T`` on the nonzero block pattern."""

    def __init__(self, S: np.ndarray, block_sizes, perm: np.ndarray | None = None):
        self.block_sizes = list(block_sizes)
        n = len(self.block_sizes)
        off = _block_offsets(self.block_sizes)
        self.offsets = off
        adjacency = block_pattern(S, self.block_sizes)
        self.perm = minimum_degree_ordering(adjacency) if perm is None else np.asarray(perm, dtype=int)
        pos = np.empty(n, dtype=int)
        pos[self.perm] = np.arange(n)
        self.pos = pos
        # A[p][q] for p >= q, in elimination positions
        cols: list[dict] = [dict() for _ in range(n)]
        for a in range(n):
            pa = pos[a]
            cols[pa][pa] = S[off[a] : off[a + 1], off[a] : off[a + 1]].copy()
            for b in adjacency[a]:
                pb = pos[b]
                if pa > pb:
                    cols[pb][pa] = S[off[a] : off[a + 1], off[b] : off[b + 1]].copy()
        self.L: list[dict] = [dict() for _ in range(n)]
        for j in range(n):
            col = cols[j]
            try:
                Ljj = np.linalg.cholesky(col.pop(j))
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite(f"pivot block {self.perm[j]} is not positive definite") from exc
            self.L[j][j] = Ljj
            rows = sorted(col)
            for i in rows:
                self.L[j][i] = solve_triangular(Ljj, col[i].T, lower=True).T
            for x, i in enumerate(rows):
                Lij = self.L[j][i]
                for k in rows[: x + 1]:
                    upd = Lij @ self.L[j][k].T
                    tgt = cols[k]
                    if i in tgt:
                        tgt[i] -= upd
                    else:
                        tgt[i] = -upd
        self.fill_blocks = sum(len(c) for c in self.L)

    def nnz(self) -> int:
        """Scalar nonzeros of L (lower triangle, diagonal blocks counted fully)."""
        total = 0
        for j, col in enumerate(self.L):
            for i, blk in col.items():
                total += blk.size
        return total

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        n = len(self.block_sizes)
        off = self.offsets
        y = [rhs[off[self.perm[p]] : off[self.perm[p] + 1]].astype(float).copy() for p in range(n)]
        for j in range(n):
            y[j] = solve_triangular(self.L[j][j], y[j], lower=True)
            for i, Lij in self.L[j].items():
                if i != j:
                    y[i] -= Lij @ y[j]
        for j in range(n - 1, -1, -1):
            acc = y[j].copy()
            for i, Lij in self.L[j].items():
                if i != j:
                    acc -= Lij.T @ y[i]
            y[j] = solve_triangular(self.L[j][j], acc, lower=True, trans="T")
        x = np.empty_like(rhs, dtype=float)
        for p in range(n):
            a = self.perm[p]
            x[off[a] : off[a + 1]] = y[p]
        return x


def sparse_factor_solve(S: np.ndarray, rhs: np.ndarray, block_sizes=None, max_doublings: int = 5) -> np.ndarray:
    """Solve ``S x = rhs`` for symmetric positive (semi-)definite ``S``.

    On a failed pivot the diagonal is inflated by ``delta * diag(S)``, with
    ``delta`` doubling from 1e-9, up to ``max_doublings`` retries.
    """
    S = np.asarray(S, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if block_sizes is None:
        block_sizes = [1] * len(rhs)
    if len(rhs) == 0:
        return np.zeros(0)
    diag = np.diag(S).copy()
    floor = 1e-12 * max(1.0, float(np.max(np.abs(diag))))
    delta = 1e-9
    A = S
    for attempt in range(max_doublings + 1):
        try:
            return BlockCholesky(A, block_sizes).solve(rhs)
        except NotPositiveDefinite:
            if attempt == max_doublings:
                raise
            A = S + np.diag(delta * np.maximum(np.abs(diag), floor))
            delta *= 2.0
    raise NotPositiveDefinite("unreachable")


# --------------------------------------------------------------------------
# Gauss-Newton
# --------------------------------------------------------------------------


@dataclass
class SolveResult:
    energies: list = field(default_factory=list)
    accepted: list = field(default_factory=list)  # (energy before, energy after) per accepted step
    iterations: int = 0
    converged: bool = False
    log: list = field(default_factory=list)
    layout: VariableLayout | None = None

    @property
    def final_energy(self) -> float:
        return self.energies[-1] if self.energies else float("nan")


def default_layout(graph, config: SolverConfig, fixed_frames=(), frozen_depths=()) -> VariableLayout:
    frames = graph.frame_indices()
    fixed = set(fixed_frames)
    if config.gauge and frames:
        fixed.add(frames[0])
    poses = [f for f in frames if f not in fixed]
    depths = [
        i for i, kf in enumerate(graph.keyframes)
        if kf.inv_depth is not None and i not in set(frozen_depths)
    ]
    return VariableLayout(poses, depths, config.optimize_intrinsics, graph.intrinsics.num_params)


class _State:
    """Snapshot/restore of the free variables."""

    def __init__(self, graph, layout: VariableLayout):
        self.graph = graph
        self.layout = layout
        self.poses = {f: _pose_of(graph, f) for f in layout.poses}
        self.depths = {i: graph.keyframes[i].inv_depth.copy() for i in layout.depths}
        self.intrinsics = graph.intrinsics

    def restore(self):
        for f, p in self.poses.items():
            self.graph.set_pose(f, p)
        for i, d in self.depths.items():
            self.graph.keyframes[i].inv_depth = d.copy()
        self.graph.intrinsics = self.intrinsics


def _pose_of(graph, frame_index) -> Pose:
    for kf in graph.keyframes:
        if kf.frame_index == frame_index:
            return kf.pose
    raise KeyError(frame_index)


def _apply_step(graph, layout: VariableLayout, state: _State, dc: np.ndarray, dd: np.ndarray):
    for f in layout.poses:
        c = layout.pose_col[f]
        graph.set_pose(f, Pose.exp(dc[c : c + 6]) @ state.poses[f])
    P = graph.grid_shape[0] * graph.grid_shape[1]
    for n, i in enumerate(layout.depths):
        kf = graph.keyframes[i]
        shape = kf.inv_depth.shape
        new = state.depths[i].reshape(-1) + dd[n * P : (n + 1) * P]
        kf.inv_depth = np.clip(new, DEPTH_MIN, DEPTH_MAX).reshape(shape)
    if layout.intrinsics:
        k = state.intrinsics
        c = layout.intrinsics_col
        f = k.f * math.exp(dc[c])
        if k.num_params == 2:
            logit = math.log(k.alpha / (1.0 - k.alpha)) + dc[c + 1]
            alpha = 1.0 / (1.0 + math.exp(-logit))
            graph.intrinsics = k.with_params([f, min(alpha, 1.0 - 1e-12)])
        else:
            graph.intrinsics = k.with_params([f])


def _damp(ne: NormalEquations, lam: float) -> NormalEquations:
    d = np.diag(ne.H_cc)
    floor = 1e-12 * max(1.0, float(d.max()) if d.size else 1.0)
    H_cc = ne.H_cc + np.diag(lam * np.maximum(d, floor))
    H_dd = ne.H_dd * (1.0 + lam)
    return NormalEquations(H_cc, ne.g_c, H_dd, ne.g_d, ne.blocks, ne.block_sizes)


def solve_step(ne: NormalEquations):
    """Full GN step ``(dc, dd)`` via Schur elimination and sparse factorisation."""
    reduced = schur_eliminate_depth(ne)
    if len(reduced.b):
        dc = sparse_factor_solve(reduced.S, -reduced.b, reduced.block_sizes)
    else:
        dc = np.zeros(0)
    dd = back_substitute(ne, reduced, dc)
    return dc, dd


def gauss_newton(
    graph,
    config: SolverConfig = SolverConfig(),
    layout: VariableLayout | None = None,
    switches: TermSwitches = TermSwitches(),
    edges=None,
) -> SolveResult:
    """Minimise the graph energy in place; returns the iteration history.

    Poses move by left retraction, inverse depths are clamped to
    [1e-4, 1e4], focal length moves in log space and alpha in logit space.
    Rejected steps escalate the damping tenfold; three consecutive rejections
    with a non-negligible energy increase raise :class:`DivergedEnergy` after
    restoring the last accepted state.

    Within one iteration the set of reprojections counted as inside the
    image is frozen at the linearisation point, so trial energies are smooth
    functions of the step; ``energies`` records the energy at each
    linearisation point.
    """
    if layout is None:
        layout = default_layout(graph, config)
    if layout.intrinsics and graph.intrinsics.num_params == 2:
        a = min(max(graph.intrinsics.alpha, 1e-4), 1.0 - 1e-4)
        graph.intrinsics = graph.intrinsics.with_params([graph.intrinsics.f, a])
    meas = Measurements(graph, switches, edges)
    kw = dict(switches=switches, alpha_reg=config.alpha_reg, huber_delta=config.huber_delta, measurements=meas)
    result = SolveResult(layout=layout)
    lam = config.damping
    for it in range(config.max_iters):
        meas.active = None
        terms, ne = assemble_energy(graph, layout=layout, **kw)
        energy = terms.total
        result.energies.append(energy)
        meas.active = meas.inbounds
        state = _State(graph, layout)
        rejections = 0
        while True:
            try:
                dc, dd = solve_step(_damp(ne, lam))
            except NotPositiveDefinite:
                dc = dd = None
            if dc is not None:
                step_norm = float(math.sqrt(dc @ dc + dd @ dd))
                _apply_step(graph, layout, state, dc, dd)
                new_energy = assemble_energy(graph, **kw)[0].total
                if new_energy <= energy:
                    break
                state.restore()
                if step_norm < config.step_tolerance or new_energy - energy <= 1e-12 * energy:
                    # roundoff-level change: already at the minimum
                    result.converged = True
                    result.iterations = it + 1
                    result.log.append(f"iter {it} energy {energy:.9e} {lam:.3e} {0.0:.3e}")
                    _mark_optimized(graph, layout)
                    return result
            rejections += 1
            lam *= 10.0
            if rejections >= 3:
                _mark_optimized(graph, layout)
                raise DivergedEnergy(f"energy increased {rejections} times in a row at iteration {it}")
        lam = max(lam / 2.0, 1e-12)
        result.accepted.append((energy, new_energy))
        result.iterations = it + 1
        line = f"iter {it} energy {new_energy:.9e} {lam:.3e} {step_norm:.3e}"
        result.log.append(line)
        logger.debug(line)
        if step_norm < config.step_tolerance or new_energy == 0.0:
            result.converged = True
            break
    meas.active = None
    result.energies.append(assemble_energy(graph, **kw)[0].total)
    _mark_optimized(graph, layout)
    return result


def _mark_optimized(graph, layout):
    for i in layout.depths:
        graph.keyframes[i].optimized = True
