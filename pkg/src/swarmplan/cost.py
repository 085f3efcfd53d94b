"""Trajectory costs for contour following, altitude deconfliction, and energy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .field import GradientGrid, sample_external

__all__ = [
    "Trajectory",
    "CostWeights",
    "EnergyCoefficients",
    "bending_cost",
    "edge_cost",
    "level_cost",
    "altitude_cost",
    "trajectory_energy",
    "OUT_OF_BOUNDS_PENALTY",
    "KEEP_OUT_PENALTY",
    "INFEASIBLE_PENALTY",
]

OUT_OF_BOUNDS_PENALTY = 1.0e6   # per waypoint that leaves the sampled grid
KEEP_OUT_PENALTY = 1.0e6        # per waypoint inside a protection bubble
INFEASIBLE_PENALTY = 1.0e9      # base for separation violations


@dataclass(frozen=True)
class Trajectory:
    """A planar curve sampled at uniform arc-length spacing.

    Holds k planning steps of length step_len each, sampled every `spacing`
    meters, so points has k * step_len / spacing + 1 rows.
    """

    points: np.ndarray
    spacing: float = 1.0
    step_len: float = 10.0
    n_steps: int = 10

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must have shape (L, 2), got {pts.shape}")
        if self.spacing <= 0 or self.step_len <= 0 or self.n_steps < 1:
            raise ValueError("spacing, step_len and n_steps must be positive")
        per_step = self.step_len / self.spacing
        if abs(per_step - round(per_step)) > 1e-9:
            raise ValueError(f"step_len {self.step_len} is not a multiple of "
                             f"spacing {self.spacing}")
        expect = self.n_steps * int(round(per_step)) + 1
        if pts.shape[0] != expect:
            raise ValueError(f"expected {expect} points for {self.n_steps} steps "
                             f"of {self.step_len} m at {self.spacing} m spacing, "
                             f"got {pts.shape[0]}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def spacing_spread(self) -> float:
        """Max relative deviation of consecutive chord lengths from their mean."""
        d = np.diff(self.points, axis=0)
        lens = np.hypot(d[:, 0], d[:, 1])
        mean = lens.mean()
        if mean == 0:
            return 0.0
        return float(np.abs(lens - mean).max() / mean)


@dataclass(frozen=True)
class CostWeights:
    """Convex blend between smoothness and edge attraction."""

    energy: float = 0.5
    safety: float = 0.5

    def __post_init__(self):
        if self.energy < 0 or self.safety < 0:
            raise ValueError("cost weights must be non-negative")
        if abs(self.energy + self.safety - 1.0) > 1e-9:
            raise ValueError(f"cost weights must sum to 1, got "
                             f"{self.energy} + {self.safety}")


@dataclass(frozen=True)
class EnergyCoefficients:
    """Power coefficients for the per-step flight energy model."""

    p_turn: float = 1.0     # per rad of heading change, scaled by mass
    p_lift: float = 1.0     # per meter of path and altitude change, times m*g
    p_comms: float = 0.01   # communication cost per meter traveled
    mass: float = 1.0       # kg
    gravity: float = 9.81   # m/s^2


def bending_cost(points, spacing: float = 1.0):
    """Discrete bending energy: sum of squared second differences over 2 h^3.

    Zero exactly on collinear evenly spaced points; approximately half the
    squared curvature integrated along the curve.  Accepts batched input
    (..., L, 2) and returns shape (...).
    """
    pts = np.asarray(points, dtype=float)
    d2 = pts[..., 2:, :] - 2.0 * pts[..., 1:-1, :] + pts[..., :-2, :]
    return np.einsum("...ij,...ij->...", d2, d2) / (2.0 * spacing**3)


def edge_cost(points, grid: GradientGrid, spacing: float = 1.0):
    """Edge attraction reward: minus half the squared edge magnitude, summed.

    Non-positive on the grid; each waypoint off the grid adds a large
    penalty instead.  Accepts batched input (..., L, 2).
    """
    pts = np.asarray(points, dtype=float)
    val, _, inside = sample_external(grid, pts)
    reward = -0.5 * np.where(inside, val, 0.0) ** 2 * spacing
    cost = reward.sum(axis=-1)
    return cost + OUT_OF_BOUNDS_PENALTY * (~inside).sum(axis=-1)


def level_cost(points, grid: GradientGrid, weights: CostWeights,
               spacing: float = 1.0):
    """Blend of bending energy and edge attraction used by the level planner."""
    return (weights.energy * bending_cost(points, spacing)
            + weights.safety * edge_cost(points, grid, spacing))


def _pairwise_min_level_dist(trajs) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs and min same-time horizontal distance for each pair."""
    pts = np.stack([np.asarray(getattr(t, "points", t), dtype=float)
                    for t in trajs])
    n = pts.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    diff = pts[ii] - pts[jj]
    dists = np.hypot(diff[..., 0], diff[..., 1]).min(axis=-1)
    return np.stack([ii, jj], axis=1), dists


def altitude_cost(deltas, trajs, d_u2u: float,
                  base_alts: Optional[Sequence[float]] = None):
    """Total altitude displacement plus a death penalty for separation loss.

    deltas holds one altitude offset per involved UAV, batched as (..., W).
    trajs are the W time-aligned predicted trajectories.  A pair is separated
    when min over time of sqrt(level_dist^2 + vertical_gap^2) >= d_u2u, where
    the vertical gap includes base altitudes (default zero) plus deltas.
    Returns (cost, feasible) with batch shape (...).
    """
    deltas = np.asarray(deltas, dtype=float)
    w = deltas.shape[-1]
    if len(trajs) != w:
        raise ValueError(f"got {w} deltas for {len(trajs)} trajectories")
    base = np.zeros(w) if base_alts is None else np.asarray(base_alts, dtype=float)
    if base.shape != (w,):
        raise ValueError(f"base_alts must have shape ({w},), got {base.shape}")
    pairs, m = _pairwise_min_level_dist(trajs)
    alts = base + deltas
    vert = alts[..., pairs[:, 0]] - alts[..., pairs[:, 1]]
    closest = np.sqrt(m**2 + vert**2)
    violation = np.maximum(0.0, d_u2u - closest)
    total_violation = violation.sum(axis=-1)
    feasible = total_violation <= 1e-12
    move = np.abs(deltas).sum(axis=-1)
    cost = np.where(feasible, move, INFEASIBLE_PENALTY * (1.0 + total_violation))
    if cost.ndim == 0:
        return float(cost), bool(feasible)
    return cost, feasible


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def trajectory_energy(points3d, coeffs: EnergyCoefficients = EnergyCoefficients(),
                      turn_angles: Optional[np.ndarray] = None) -> float:
    """Flight energy of an executed path of (x, y, z) samples.

    Charges turning per radian of heading change, lift per meter of
    horizontal travel and per meter of altitude change, and communication
    per meter of horizontal travel.  turn_angles overrides the per-segment
    heading variation when the executed curvature record is available.
    """
    pts = np.asarray(points3d, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points3d must have shape (T, 3), got {pts.shape}")
    if pts.shape[0] < 2:
        return 0.0
    d = np.diff(pts, axis=0)
    seg = np.hypot(d[:, 0], d[:, 1])
    climb = np.abs(d[:, 2])
    if turn_angles is not None:
        turn = float(np.abs(np.asarray(turn_angles, dtype=float)).sum())
    else:
        moving = seg > 1e-12
        headings = np.arctan2(d[moving, 1], d[moving, 0])
        turn = float(np.abs(_wrap_angle(np.diff(headings))).sum()) if headings.size > 1 else 0.0
    return (coeffs.p_turn * coeffs.mass * turn
            + coeffs.p_lift * coeffs.mass * coeffs.gravity * float(seg.sum() + climb.sum())
            + coeffs.p_comms * float(seg.sum()))
