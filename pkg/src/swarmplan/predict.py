"""Short-horizon trajectory prediction by relaxing an elastic curve.

Each UAV's next k steps are initialized as a straight ride along its current
velocity and then relaxed onto the safe contour of the sampled field.  One
relaxation step solves a pentadiagonal system (implicit bending smoothing)
after nudging waypoints along the edge-attraction force; the first waypoint
stays clamped to the UAV.  The step size backs off automatically whenever the
blended cost would rise, so the recorded cost trace never increases.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .cost import OUT_OF_BOUNDS_PENALTY, Trajectory
from .field import GradientGrid, multi_grid_sampler

__all__ = [
    "ElSystem",
    "PredictionResult",
    "ConflictSet",
    "build_el_system",
    "init_prediction",
    "predict_trajectory",
    "predict_batch",
    "detect_conflicts",
]


@dataclass(frozen=True, eq=False)
class ElSystem:
    """Implicit smoothing operator I + w * B for an open curve of L points.

    B is the squared second-difference form with natural end conditions, so
    every straight evenly spaced curve is a fixed point.  Row 0 is replaced
    with identity to clamp the curve start.  The operator is assembled once
    per (length, weight) pair and inverted up front; relaxation then costs a
    single small matmul per step.  The banded layout is kept alongside for
    callers that prefer factorized solves on longer curves.
    """

    length: int
    smooth_weight: float
    matrix: np.ndarray    # (L, L) dense
    banded: np.ndarray    # (5, L) diagonal-ordered for solve_banded
    inverse: np.ndarray   # (L, L) precomputed inverse, applied per relaxation step

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.inverse @ rhs


@lru_cache(maxsize=64)
def build_el_system(length: int, smooth_weight: float) -> ElSystem:
    """Assemble the pentadiagonal relaxation system for a curve of `length` points."""
    if length < 5:
        raise ValueError(f"curve must have at least 5 points, got {length}")
    if smooth_weight < 0:
        raise ValueError(f"smooth weight must be non-negative, got {smooth_weight}")
    d2 = np.zeros((length - 2, length))
    idx = np.arange(length - 2)
    d2[idx, idx] = 1.0
    d2[idx, idx + 1] = -2.0
    d2[idx, idx + 2] = 1.0
    m = np.eye(length) + smooth_weight * (d2.T @ d2)
    m[0, :] = 0.0
    m[0, 0] = 1.0
    banded = np.zeros((5, length))
    for i in range(length):
        lo, hi = max(0, i - 2), min(length, i + 3)
        for j in range(lo, hi):
            banded[2 + i - j, j] = m[i, j]
    inverse = np.linalg.inv(m)
    return ElSystem(length=length, smooth_weight=float(smooth_weight),
                    matrix=m, banded=banded, inverse=inverse)


def init_prediction(position, velocity, n_steps: int = 10, step_len: float = 10.0,
                    spacing: float = 1.0) -> Trajectory:
    """Straight-line initial guess: ride the current velocity for k steps."""
    position = np.asarray(position, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    speed = float(np.hypot(velocity[0], velocity[1]))
    if speed < 1e-12:
        raise ValueError("cannot initialize a prediction from zero velocity")
    direction = velocity / speed
    n_pts = n_steps * int(round(step_len / spacing)) + 1
    offsets = spacing * np.arange(n_pts)
    pts = position[None, :] + offsets[:, None] * direction[None, :]
    return Trajectory(pts, spacing=spacing, step_len=step_len, n_steps=n_steps)


@dataclass(frozen=True)
class PredictionResult:
    trajectory: Trajectory
    converged: bool
    failed: bool
    iterations: int
    cost_trace: np.ndarray   # blended level cost after each accepted iteration
    step_scale: float        # force step scale in effect at exit


def _resample_uniform(pts: np.ndarray, spacing: float, n_pts: int) -> np.ndarray:
    """Re-space a polyline to n_pts points every `spacing` m along its length.

    A curve that relaxed shorter than the target length is extended straight
    along its final direction.
    """
    seg = np.diff(pts, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    target_total = spacing * (n_pts - 1)
    total = float(lens.sum())
    if total < target_total - 1e-12:
        moving = lens > 1e-12
        if moving.any():
            last = seg[np.nonzero(moving)[0][-1]]
            direction = last / np.hypot(last[0], last[1])
        else:
            direction = np.array([1.0, 0.0])
        pts = np.vstack([pts, pts[-1] + direction * (target_total - total + spacing)])
        seg = np.diff(pts, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    targets = spacing * np.arange(n_pts)
    return np.stack([np.interp(targets, cum, pts[:, 0]),
                     np.interp(targets, cum, pts[:, 1])], axis=1)


_RUNNING, _CONVERGED, _FAILED = 0, 1, 2


def predict_batch(inits: Sequence[Trajectory], system: ElSystem,
                  grids: Sequence[GradientGrid],
                  max_iter: int = 200, tol: float = 1e-3,
                  step_scale: float = 1.0, max_backtracks: int = 30,
                  max_halvings: int = 6) -> list:
    """Relax one curve per grid, all in lockstep.

    Produces the same per-curve results as repeated predict_trajectory
    calls; the implicit solve and the field sampling are batched across
    curves, which matters when several UAVs plan on grids sharing axes.
    """
    inits = list(inits)
    grids = list(grids)
    if len(inits) != len(grids):
        raise ValueError(f"{len(inits)} trajectories for {len(grids)} grids")
    if not inits:
        return []
    for t in inits:
        if system.length != len(t):
            raise ValueError(f"system built for {system.length} points, "
                             f"trajectory has {len(t)}")
        if abs(t.spacing - inits[0].spacing) > 1e-12:
            raise ValueError("batched trajectories must share waypoint spacing")
    n = len(inits)
    w1 = system.smooth_weight
    w2 = 1.0 - w1
    h = inits[0].spacing
    sample = multi_grid_sampler(grids)

    def blended(points, val, inside):
        d2 = points[:, 2:] - 2.0 * points[:, 1:-1] + points[:, :-2]
        bend = np.einsum("bij,bij->b", d2, d2) / (2.0 * h ** 3)
        sq = np.where(inside, val, 0.0)
        edge = np.einsum("bi,bi->b", sq, sq) * (-0.5 * h)
        edge = edge + OUT_OF_BOUNDS_PENALTY * (~inside).sum(axis=1)
        return w1 * bend + w2 * edge

    pts = np.stack([t.points for t in inits])
    starts = pts[:, 0].copy()
    rows_all = np.arange(n)
    val, grad, inside = sample(pts, rows_all)
    cost = blended(pts, val, inside)
    traces = [[float(c)] for c in cost]
    prev_disp = np.full(n, np.inf)
    grow_streak = np.zeros(n, dtype=int)
    halvings = np.zeros(n, dtype=int)
    scale = np.full(n, float(step_scale))
    status = np.full(n, _RUNNING, dtype=int)
    iters = np.full(n, 0, dtype=int)
    it = 0
    running = status == _RUNNING
    while running.any() and it < max_iter:
        it += 1
        # settled rows ride along at zero cost impact; only running rows commit
        force = -w2 * grad
        g = scale.copy()
        accepted = ~running
        for _ in range(max_backtracks + 1):
            if accepted.all():
                break
            rhs = pts + g[:, None, None] * force
            rhs[:, 0] = starts
            cand = system.solve(rhs)
            cand[:, 0] = starts
            c_val, c_grad, c_inside = sample(cand, rows_all)
            c_cost = blended(cand, c_val, c_inside)
            ok = np.isfinite(c_cost) & (c_cost <= cost)
            g[~(accepted | ok)] *= 0.5
            accepted |= ok
        for u in np.nonzero(running & ~accepted)[0]:
            status[u] = _CONVERGED   # cost plateau: no productive step remains
            iters[u] = it - 1
        upd = np.nonzero(running & accepted)[0]
        if upd.size == 0:
            running = status == _RUNNING
            continue
        disp = np.abs(cand - pts).max(axis=(1, 2))
        pts[upd] = cand[upd]
        val[upd] = c_val[upd]
        grad[upd] = c_grad[upd]
        inside[upd] = c_inside[upd]
        cost[upd] = c_cost[upd]
        # candidates with non-finite cost never pass the acceptance filter,
        # so committed points stay finite without a separate check
        for u in upd:
            traces[u].append(float(c_cost[u]))
            iters[u] = it
            scale[u] = g[u]
            d = disp[u]
            if d >= prev_disp[u] * (1.0 + 1e-12):
                grow_streak[u] += 1
                if grow_streak[u] >= 10:
                    halvings[u] += 1
                    if halvings[u] > max_halvings:
                        status[u] = _FAILED
                        continue
                    scale[u] *= 0.5
                    grow_streak[u] = 0
            else:
                grow_streak[u] = 0
            prev_disp[u] = d
            if d < tol:
                status[u] = _CONVERGED
        running = status == _RUNNING
    iters[running] = max_iter

    results = []
    for u in range(n):
        if status[u] == _FAILED:
            results.append(PredictionResult(inits[u], False, True, int(iters[u]),
                                            np.asarray(traces[u]), float(scale[u])))
            continue
        out = _resample_uniform(pts[u], h, len(inits[u]))
        out[0] = starts[u]
        traj = Trajectory(out, spacing=h, step_len=inits[u].step_len,
                          n_steps=inits[u].n_steps)
        results.append(PredictionResult(traj, status[u] == _CONVERGED, False,
                                        int(iters[u]), np.asarray(traces[u]),
                                        float(scale[u])))
    return results


def predict_trajectory(init: Trajectory, system: ElSystem, grid: GradientGrid,
                       max_iter: int = 200, tol: float = 1e-3,
                       step_scale: float = 1.0, max_backtracks: int = 30,
                       max_halvings: int = 6) -> PredictionResult:
    """Relax the initial trajectory onto the contour through the UAV's level.

    Iterates implicit-smoothing / explicit-force steps until the largest
    waypoint displacement falls below tol.  A step that would raise the
    blended cost is retried with a halved force step; when no step helps the
    curve is already at a plateau and iteration stops.  Ten consecutive
    displacement-growth iterations also halve the step scale; once the
    halving budget is spent, or values go non-finite, the initial trajectory
    comes back flagged as failed.
    """
    return predict_batch([init], system, [grid], max_iter=max_iter, tol=tol,
                         step_scale=step_scale, max_backtracks=max_backtracks,
                         max_halvings=max_halvings)[0]


@dataclass(frozen=True)
class ConflictSet:
    """Pairs of UAVs whose predictions come closer than the separation floor."""

    pairs: tuple            # (i, j, min_dist, step_index) per conflicting pair
    involved: frozenset     # UAV indices in any conflicting pair
    threshold: float

    def __bool__(self):
        return bool(self.pairs)


def detect_conflicts(trajectories: Sequence, threshold: float,
                     altitudes: Optional[Sequence[float]] = None) -> ConflictSet:
    """Find trajectory pairs violating separation at any shared time index.

    Distances compare waypoints of the same index, so two paths that cross in
    space but not in time do not conflict.  When `altitudes` is given, each
    pair's planar minimum combines with its fixed altitude gap, so vertically
    separated pairs drop out; reported pair distances stay planar.
    """
    pts = np.stack([np.asarray(getattr(t, "points", t), dtype=float)
                    for t in trajectories])
    n = pts.shape[0]
    if n < 2:
        return ConflictSet((), frozenset(), float(threshold))
    ii, jj = np.triu_indices(n, k=1)
    diff = pts[ii] - pts[jj]
    dists = np.hypot(diff[..., 0], diff[..., 1])
    mins = dists.min(axis=-1)
    argmins = dists.argmin(axis=-1)
    hit = mins < threshold
    if altitudes is not None:
        alts = np.asarray(altitudes, dtype=float)
        if alts.shape != (n,):
            raise ValueError(f"expected {n} altitudes, got shape {alts.shape}")
        hit &= np.hypot(mins, alts[ii] - alts[jj]) < threshold
    pairs = tuple((int(i), int(j), float(d), int(l))
                  for i, j, d, l in zip(ii[hit], jj[hit], mins[hit], argmins[hit]))
    involved = frozenset(int(i) for p in pairs for i in p[:2])
    return ConflictSet(pairs, involved, float(threshold))
