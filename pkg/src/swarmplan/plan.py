"""Maneuver search: constant-curvature arcs in the plane, altitude offsets out of it.

The level branch searches (heading, curvature) for one planning step with a
particle swarm warm-started from the predicted trajectory's first step.  The
altitude branch runs one independent swarm per involved UAV over joint
altitude offsets and adopts the cheapest feasible consensus answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .cost import (
    CostWeights,
    INFEASIBLE_PENALTY,
    KEEP_OUT_PENALTY,
    OUT_OF_BOUNDS_PENALTY,
    altitude_cost,
    bending_cost,
)
from .field import GradientGrid, multi_grid_sampler
from .predict import PredictionResult

__all__ = [
    "ArcParams",
    "PsoConfig",
    "PsoResult",
    "AltitudePlan",
    "arc_points",
    "arc_points_batch",
    "fit_arc",
    "pso_minimize",
    "plan_level",
    "plan_level_many",
    "plan_altitude",
]


@dataclass(frozen=True)
class ArcParams:
    """One constant-curvature planning step from a fixed origin."""

    heading: float      # tangent direction at the arc start, rad
    curvature: float    # signed, 1/m; positive bends left
    origin: np.ndarray  # (2,)
    step_len: float     # arc length, m

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))

    def end_heading(self) -> float:
        return self.heading + self.curvature * self.step_len


def arc_points_batch(headings, curvatures, origin, step_len: float, n: int):
    """Sample B arcs at n points equally spaced along their length: (B, n, 2).

    origin is one shared (2,) start or per-arc starts of shape (B, 2).
    """
    om = np.asarray(headings, dtype=float)[:, None]
    ka = np.asarray(curvatures, dtype=float)[:, None]
    origin = np.asarray(origin, dtype=float)
    if origin.ndim == 1:
        ox, oy = origin[0], origin[1]
    else:
        ox, oy = origin[:, 0:1], origin[:, 1:2]
    s = np.linspace(0.0, step_len, n)[None, :]
    straight = np.abs(ka) < 1e-12
    k_safe = np.where(straight, 1.0, ka)
    ang = om + ka * s
    x_arc = (np.sin(ang) - np.sin(om)) / k_safe
    y_arc = -(np.cos(ang) - np.cos(om)) / k_safe
    x_line = s * np.cos(om)
    y_line = s * np.sin(om)
    x = np.where(straight, x_line, x_arc) + ox
    y = np.where(straight, y_line, y_arc) + oy
    return np.stack([x, y], axis=-1)


def arc_points(arc: ArcParams, n: int) -> np.ndarray:
    """Sample one arc at n points equally spaced along its length: (n, 2)."""
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    return arc_points_batch([arc.heading], [arc.curvature], arc.origin,
                            arc.step_len, n)[0]


def fit_arc(points) -> tuple[float, float]:
    """Recover (heading, curvature) of a constant-curvature arc from its samples.

    Collinear points give exactly zero curvature.  Curved fits solve the
    algebraic circle least squares and take the turn sign from chord cross
    products; the start heading corrects the first chord direction by half a
    chord's turn.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ValueError(f"need at least 3 planar points, got shape {pts.shape}")
    chords = np.diff(pts, axis=0)
    lens = np.hypot(chords[:, 0], chords[:, 1])
    if lens.min() < 1e-12:
        raise ValueError("repeated consecutive points cannot define an arc")
    cross = chords[:-1, 0] * chords[1:, 1] - chords[:-1, 1] * chords[1:, 0]
    span = lens.max()
    if np.abs(cross).max() <= 1e-9 * span**2:
        direction = pts[-1] - pts[0]
        return float(np.arctan2(direction[1], direction[0])), 0.0
    x, y = pts[:, 0], pts[:, 1]
    a = np.stack([2.0 * x, 2.0 * y, np.ones_like(x)], axis=1)
    sol, *_ = np.linalg.lstsq(a, x**2 + y**2, rcond=None)
    cx, cy, c = sol
    radius = math.sqrt(max(c + cx**2 + cy**2, 1e-300))
    kappa = math.copysign(1.0 / radius, cross.sum())
    chord = float(lens.mean())
    half_turn = math.asin(min(1.0, abs(kappa) * chord / 2.0))
    arc_h = 2.0 * half_turn / abs(kappa)
    first = math.atan2(chords[0, 1], chords[0, 0])
    return first - kappa * arc_h / 2.0, float(kappa)


@dataclass(frozen=True)
class PsoConfig:
    """Swarm search settings; bounds has shape (D, 2) rows of (low, high)."""

    bounds: np.ndarray
    particles: int = 30
    iterations: int = 50
    inertia: float = 0.7
    cognitive: float = 0.5
    social: float = 0.5

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 1] < b[:, 0]):
            raise ValueError(f"bounds must be (D, 2) rows of (low, high), got {b}")
        object.__setattr__(self, "bounds", b)
        if self.particles < 1 or self.iterations < 0:
            raise ValueError("particles must be >= 1 and iterations >= 0")


@dataclass(frozen=True)
class PsoResult:
    position: np.ndarray   # (D,) best found
    cost: float
    trace: np.ndarray      # best cost after init and each iteration


def _pso_many(cost_fn: Callable[[np.ndarray], np.ndarray],
              configs: Sequence[PsoConfig],
              rngs: Sequence[np.random.Generator],
              init_positions: Sequence[Optional[np.ndarray]]) -> list:
    """Lockstep global-best swarms over several boxed problems at once.

    cost_fn maps positions (U, P, D) to costs (U, P); every problem must
    share particle count, iteration count, and coefficients so the swarms
    march together.  Each problem draws from its own generator, so results
    per problem match a standalone run exactly.
    """
    n = len(configs)
    base = configs[0]
    p, d = base.particles, base.bounds.shape[0]
    for c in configs:
        if (c.particles, c.iterations, c.inertia, c.cognitive, c.social) != \
                (base.particles, base.iterations, base.inertia,
                 base.cognitive, base.social) or c.bounds.shape != (d, 2):
            raise ValueError("lockstep swarms need matching shapes and settings")
    lo = np.stack([c.bounds[:, 0] for c in configs])[:, None, :]   # (U, 1, D)
    hi = np.stack([c.bounds[:, 1] for c in configs])[:, None, :]
    x = np.empty((n, p, d))
    for u in range(n):
        if init_positions[u] is None:
            x[u] = rngs[u].uniform(configs[u].bounds[:, 0],
                                   configs[u].bounds[:, 1], size=(p, d))
        else:
            seed_x = np.asarray(init_positions[u], dtype=float)
            if seed_x.shape != (p, d):
                raise ValueError(f"init_positions must have shape ({p}, {d}), "
                                 f"got {seed_x.shape}")
            x[u] = np.clip(seed_x, configs[u].bounds[:, 0], configs[u].bounds[:, 1])
    v = np.zeros_like(x)
    pcost = np.asarray(cost_fn(x), dtype=float)
    pbest = x.copy()
    rows = np.arange(n)
    g = np.argmin(pcost, axis=1)
    gbest = pbest[rows, g].copy()
    gcost = pcost[rows, g].copy()
    traces = [[float(c)] for c in gcost]
    for _ in range(base.iterations):
        r1 = np.stack([rng.uniform(size=(p, d)) for rng in rngs])
        r2 = np.stack([rng.uniform(size=(p, d)) for rng in rngs])
        v = (base.inertia * v
             + base.cognitive * r1 * (pbest - x)
             + base.social * r2 * (gbest[:, None, :] - x))
        x = np.clip(x + v, lo, hi)
        costs = np.asarray(cost_fn(x), dtype=float)
        better = costs < pcost
        pbest[better] = x[better]
        pcost[better] = costs[better]
        g = np.argmin(pcost, axis=1)
        val = pcost[rows, g]
        imp = val < gcost
        gbest[imp] = pbest[rows[imp], g[imp]]
        gcost[imp] = val[imp]
        for u in range(n):
            traces[u].append(float(gcost[u]))
    return [PsoResult(position=gbest[u].copy(), cost=float(gcost[u]),
                      trace=np.asarray(traces[u])) for u in range(n)]


def pso_minimize(cost_fn: Callable[[np.ndarray], np.ndarray], config: PsoConfig,
                 rng: np.random.Generator,
                 init_positions: Optional[np.ndarray] = None) -> PsoResult:
    """Global-best particle swarm over a box.

    cost_fn maps positions (P, D) to costs (P,).  Velocities start at zero;
    per-iteration uniform draws scale the cognitive and social pulls per
    component; positions clamp to the box.  The returned trace is the
    monotone global-best history.
    """
    return _pso_many(lambda x: np.asarray(cost_fn(x[0]))[None, :],
                     [config], [rng], [init_positions])[0]


def _default_pso(bounds) -> PsoConfig:
    return PsoConfig(bounds=bounds)


def plan_level_many(positions, headings, grids: Sequence[GradientGrid],
                    predictions: Sequence[Optional[PredictionResult]],
                    weights: CostWeights, rngs: Sequence[np.random.Generator],
                    step_len: float = 10.0, spacing: float = 1.0,
                    kappa_max: float = 0.2, init_sigma: float = 1.0,
                    particles: int = 30, iterations: int = 50,
                    inertia: float = 0.7, cognitive: float = 0.5,
                    social: float = 0.5, keep_out=None,
                    keep_radii=None, goals=None,
                    goal_pull: float = 0.0) -> list:
    """Level searches for several UAVs in lockstep, one swarm per UAV.

    Per-UAV results match plan_level run with the same generator; the arc
    sampling and cost evaluations batch across UAVs so the searches share
    their numpy passes.

    keep_out, when given, is a (K, 2) array of points the planned arcs must
    stay clear of; keep_radii holds the clearance radius per point, either
    shared (K,) or per UAV (n_uav, K).  Every arc node inside a circle is
    penalized like a node off the grid.  The contour reward alone cannot do
    this: the field plateaus inside the protection bubble, so its interior
    is cost-flat and otherwise attractive to cut through.

    goals ((n_uav, 2) with goal_pull > 0) adds goal_pull per meter of lost
    progress toward each UAV's goal.  Riding a contour sideways and rounding
    it toward the goal earn the same edge reward, so without this term a
    bubble that moves with the swarm can drag a UAV along its flank
    indefinitely; the pull breaks that tie and nothing else, since it stays
    well under the edge reward of a real contour.
    """
    n_uav = len(positions)
    if not (n_uav == len(headings) == len(grids) == len(predictions) == len(rngs)):
        raise ValueError("positions, headings, grids, predictions, and rngs "
                         "must have matching lengths")
    positions = [np.asarray(p, dtype=float) for p in positions]
    if keep_out is not None:
        keep_out = np.asarray(keep_out, dtype=float)
        keep_radii = np.broadcast_to(
            np.asarray(keep_radii, dtype=float), (n_uav, len(keep_out)))
    if goals is not None and goal_pull > 0.0:
        goals = np.asarray(goals, dtype=float).reshape(n_uav, 2)
        start_gap = np.hypot(*(np.stack(positions) - goals).T)
    n = int(round(step_len / spacing)) + 1
    configs = []
    inits = []
    for u in range(n_uav):
        heading = float(headings[u])
        bounds = np.array([[heading - math.pi / 2.0, heading + math.pi / 2.0],
                           [-kappa_max, kappa_max]])
        center = np.array([heading, 0.0])
        pred = predictions[u]
        if pred is not None and not pred.failed:
            om, ka = fit_arc(pred.trajectory.points[:n])
            om += 2.0 * math.pi * round((heading - om) / (2.0 * math.pi))
            center = np.array([om, ka])
        center = np.clip(center, bounds[:, 0], bounds[:, 1])
        # unit sigma spans half of each search range, so the swarm can reach
        # basins far from the predicted arc, e.g. when it hits a keep-out
        half = (bounds[:, 1] - bounds[:, 0]) / 2.0
        inits.append(center[None, :]
                     + init_sigma * half * rngs[u].normal(size=(particles, 2)))
        configs.append(PsoConfig(bounds=bounds, particles=particles,
                                 iterations=iterations, inertia=inertia,
                                 cognitive=cognitive, social=social))
    sample = multi_grid_sampler(grids)
    rows = np.arange(n_uav)
    origin_rep = np.repeat(np.stack(positions), particles, axis=0)

    def cost_fn(x):
        flat = x.reshape(-1, 2)
        pts = arc_points_batch(flat[:, 0], flat[:, 1], origin_rep, step_len, n)
        pts = pts.reshape(n_uav, particles, n, 2)
        val, _, inside = sample(pts.reshape(n_uav, particles * n, 2), rows)
        val = val.reshape(n_uav, particles, n)
        inside = inside.reshape(n_uav, particles, n)
        reward = -0.5 * np.where(inside, val, 0.0) ** 2 * spacing
        edge = reward.sum(axis=-1) + OUT_OF_BOUNDS_PENALTY * (~inside).sum(axis=-1)
        if keep_out is not None:
            gap = pts[:, :, :, None, :] - keep_out[None, None, None, :, :]
            near = np.hypot(gap[..., 0], gap[..., 1]) \
                < keep_radii[:, None, None, :]
            edge = edge + KEEP_OUT_PENALTY * near.any(axis=-1).sum(axis=-1)
        total = weights.energy * bending_cost(pts, spacing) + weights.safety * edge
        if goals is not None and goal_pull > 0.0:
            end_gap = np.hypot(pts[:, :, -1, 0] - goals[:, None, 0],
                               pts[:, :, -1, 1] - goals[:, None, 1])
            total = total + goal_pull * (end_gap - start_gap[:, None])
        return total

    results = _pso_many(cost_fn, configs, rngs, inits)
    return [ArcParams(heading=float(r.position[0]),
                      curvature=float(r.position[1]),
                      origin=positions[u], step_len=step_len)
            for u, r in enumerate(results)]


def plan_level(position, heading: float, grid: GradientGrid,
               prediction: Optional[PredictionResult], weights: CostWeights,
               rng: np.random.Generator, step_len: float = 10.0,
               spacing: float = 1.0, kappa_max: float = 0.2,
               init_sigma: float = 1.0, particles: int = 30,
               iterations: int = 50, inertia: float = 0.7,
               cognitive: float = 0.5, social: float = 0.5,
               keep_out=None, keep_radii=None, goal=None,
               goal_pull: float = 0.0) -> ArcParams:
    """Search one planning arc by PSO over (heading, curvature).

    The swarm initializes around the arc fitted to the prediction's first
    step (heading-hold when the prediction is missing or failed), with
    Gaussian scatter of standard deviation init_sigma in normalized bound
    units (one sigma spans half of each search range), clamped to the box.
    Headings are limited to a quarter turn either way, curvature to
    +-kappa_max.
    """
    return plan_level_many([position], [heading], [grid], [prediction],
                           weights, [rng], step_len=step_len, spacing=spacing,
                           kappa_max=kappa_max, init_sigma=init_sigma,
                           particles=particles, iterations=iterations,
                           inertia=inertia, cognitive=cognitive,
                           social=social, keep_out=keep_out,
                           keep_radii=keep_radii,
                           goals=None if goal is None else [goal],
                           goal_pull=goal_pull)[0]


@dataclass(frozen=True)
class AltitudePlan:
    """Consensus altitude offsets; zero for UAVs outside the conflict set."""

    deltas: np.ndarray        # (n_uavs,)
    involved: tuple           # sorted UAV indices that searched
    cost: float               # adopted total displacement
    feasible: bool
    fallback: bool            # True when the emergency ladder was used
    instance_costs: tuple     # best cost found by each UAV's swarm


def _emergency_ladder(count: int, d_u2u: float) -> np.ndarray:
    """Stacked alternating offsets +-g, +-2g, ... guaranteeing vertical gaps >= g."""
    g = math.ceil(d_u2u)
    mags = g * (np.arange(count) // 2 + 1)
    signs = np.where(np.arange(count) % 2 == 0, 1.0, -1.0)
    return mags * signs


def plan_altitude(conflicts, trajectories: Sequence, d_u2u: float,
                  seeds: Sequence[int], n_uavs: int, delta_max: float = 20.0,
                  base_alts: Optional[Sequence[float]] = None,
                  particles: int = 30, iterations: int = 50,
                  inertia: float = 0.7, cognitive: float = 0.5,
                  social: float = 0.5) -> AltitudePlan:
    """Resolve predicted separation conflicts with joint altitude offsets.

    Each involved UAV runs its own swarm (seeded from `seeds`, one per UAV)
    over the joint offset vector; all of them then adopt the cheapest
    feasible result, ties broken by the lexicographically smallest vector,
    which keeps the decentralized answers identical.  If no swarm finds a
    feasible vector the alternating emergency ladder is adopted instead and
    flagged.
    """
    involved = tuple(sorted(conflicts.involved))
    w = len(involved)
    if w < 2:
        raise ValueError("altitude planning needs at least two conflicting UAVs")
    if len(seeds) != w:
        raise ValueError(f"need one seed per involved UAV ({w}), got {len(seeds)}")
    trajs = [trajectories[i] for i in involved]
    base = None if base_alts is None else np.asarray(base_alts, dtype=float)[list(involved)]
    bounds = np.repeat(np.array([[-delta_max, delta_max]]), w, axis=0)
    config = PsoConfig(bounds=bounds, particles=particles, iterations=iterations,
                       inertia=inertia, cognitive=cognitive, social=social)

    def cost_fn(x):
        cost, _ = altitude_cost(x, trajs, d_u2u, base_alts=base)
        return cost

    ladder = np.clip(_emergency_ladder(w, d_u2u), -delta_max, delta_max)
    fixed = np.stack([np.zeros(w), ladder, -ladder])
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        init = np.vstack([fixed, rng.uniform(-delta_max, delta_max,
                                             size=(max(particles - len(fixed), 0), w))])
        init = init[:particles]
        res = pso_minimize(cost_fn, config, rng, init_positions=init)
        results.append(res)
    feasible_results = [r for r in results if r.cost < INFEASIBLE_PENALTY]
    fallback = not feasible_results
    if feasible_results:
        adopted = min(feasible_results, key=lambda r: (r.cost, tuple(r.position)))
        deltas_involved = adopted.position
        cost = adopted.cost
        feasible = True
    else:
        deltas_involved = ladder
        cost, feasible = altitude_cost(deltas_involved, trajs, d_u2u, base_alts=base)
    deltas = np.zeros(n_uavs)
    for idx, uav in enumerate(involved):
        deltas[uav] = deltas_involved[idx]
    return AltitudePlan(deltas=deltas, involved=involved, cost=float(cost),
                        feasible=bool(feasible), fallback=fallback,
                        instance_costs=tuple(float(r.cost) for r in results))
