"""Closed-loop swarm simulation: sense, field, predict, deconflict, maneuver.

Obstacles fly straight at constant speed and never react.  The swarm cruises
toward per-UAV goals until a threat closes inside the trigger distance, then
every member plans through the shared pipeline: sample the field on its own
altitude plane, relax a prediction onto its contour, resolve predicted
separation conflicts with altitude offsets, and execute the best level arc.
Once the threat clears for a few consecutive steps the members drop back to
their original altitudes and resume their pre-planned paths.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field
from enum import IntEnum
from typing import Optional

import numpy as np

from .cost import CostWeights, EnergyCoefficients, Trajectory
from .field import (
    EnvironmentField,
    ObstacleModel,
    SwarmFieldSpec,
    conceptual_center,
    environment_intensity,
    field_gradient,
    grids_from_intensity_multi,
    _intensity_on_axes,
    _node_axes,
)
from .plan import (ArcParams, arc_points, plan_altitude, plan_level,
                   plan_level_many)
from .predict import build_el_system, detect_conflicts, init_prediction, predict_batch

__all__ = [
    "Mode",
    "ScenarioConfig",
    "UavState",
    "ObstacleState",
    "World",
    "RunLog",
    "make_scenario",
    "build_world",
    "step_world",
    "run_scenario",
    "compute_metrics",
    "SCENARIO_KINDS",
]

SCENARIO_KINDS = ("in_front", "on_side")
_PLANNERS = ("main", "baseline")

_STREAM_LEVEL = 1
_STREAM_ALTITUDE = 2
_STREAM_ARC_FIX = 3


class Mode(IntEnum):
    CRUISE = 0
    AVOID = 1
    RESUME = 2


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of one simulated encounter."""

    kind: str = "in_front"
    seed: int = 0
    planner: str = "main"

    arena_size: float = 300.0
    n_uavs: int = 3
    formation_radius: float = 20.0
    swarm_speed: float = 10.0
    spawn_x: float = 40.0

    n_obstacles: int = 1
    obstacle_speed: float = 5.0
    obstacle_shaped: bool = False
    shape_radius: float = 5.0
    shape_samples: int = 8
    approach_distance: float = 200.0

    sensing_range: float = 100.0
    trigger_distance: float = 50.0
    d_safe: float = 20.0
    d_obs: float = 10.0
    d_u2u: float = 5.0
    resume_steps: int = 3

    step_len: float = 10.0
    spacing: float = 1.0
    predict_steps: int = 10
    predict_max_iter: int = 200
    predict_tol: float = 1e-3
    kappa_max: float = 0.2
    delta_max: float = 20.0

    energy_weight: float = 0.5
    safety_weight: float = 0.5
    goal_pull: float = 0.01     # cost per meter of lost goal progress per arc

    swarm_influence: float = 100.0
    obstacle_influence: float = 100.0
    altitude_exclusion: Optional[float] = None   # defaults to d_safe
    grid_cell: float = 1.0
    smooth_sigma: float = 2.0

    pso_particles: int = 30
    pso_iterations: int = 50
    pso_inertia: float = 0.7
    pso_cognitive: float = 0.5
    pso_social: float = 0.5
    pso_init_sigma: float = 1.0

    p_turn: float = 1.0
    p_lift: float = 1.0
    p_comms: float = 0.01
    mass: float = 1.0
    gravity: float = 9.81

    baseline_goal_weight: float = 1.0
    baseline_repulse_weight: float = 4000.0

    max_steps: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}, "
                             f"expected one of {SCENARIO_KINDS}")
        if self.planner not in _PLANNERS:
            raise ValueError(f"unknown planner {self.planner!r}, "
                             f"expected one of {_PLANNERS}")
        if not 2 <= self.n_uavs <= 10:
            raise ValueError(f"n_uavs must be within [2, 10], got {self.n_uavs}")
        if not 1.0 <= self.formation_radius <= 20.0:
            raise ValueError(f"formation_radius must be within [1, 20], "
                             f"got {self.formation_radius}")
        if self.trigger_distance > self.sensing_range:
            raise ValueError(f"trigger_distance {self.trigger_distance} exceeds "
                             f"sensing_range {self.sensing_range}")
        if self.d_safe < self.d_obs + self.step_len:
            raise ValueError(f"d_safe {self.d_safe} must cover the collision radius "
                             f"plus one step: {self.d_obs} + {self.step_len}")
        if abs(self.energy_weight + self.safety_weight - 1.0) > 1e-9:
            raise ValueError("energy_weight and safety_weight must sum to 1")
        if self.goal_pull < 0:
            raise ValueError(f"goal_pull must be non-negative, got {self.goal_pull}")
        for name in ("swarm_speed", "obstacle_speed", "step_len", "spacing",
                     "arena_size", "grid_cell"):
            if getattr(self, name) < 0 or (name != "obstacle_speed"
                                           and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_obstacles < 1:
            raise ValueError("n_obstacles must be at least 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")

    @property
    def alt_exclusion(self) -> float:
        return self.d_safe if self.altitude_exclusion is None else self.altitude_exclusion

    def energy_coefficients(self) -> EnergyCoefficients:
        return EnergyCoefficients(p_turn=self.p_turn, p_lift=self.p_lift,
                                  p_comms=self.p_comms, mass=self.mass,
                                  gravity=self.gravity)

    def cost_weights(self) -> CostWeights:
        return CostWeights(energy=self.energy_weight, safety=self.safety_weight)


def make_scenario(kind: str = "in_front", **overrides) -> ScenarioConfig:
    """Build a validated scenario description."""
    return ScenarioConfig(kind=kind, **overrides)


@dataclass
class UavState:
    idx: int
    position: np.ndarray       # (2,)
    altitude: float
    home_altitude: float
    heading: float
    speed: float
    start: np.ndarray          # (2,) of the straight pre-planned path
    goal: np.ndarray           # (2,)
    mode: Mode = Mode.CRUISE
    energy: float = 0.0
    done: bool = False
    alt_clear: int = 0         # consecutive conflict-free steps at offset altitude
    escaping: bool = False     # entered the protection bubble, still flying out


def _sweep_offsets(velocity: np.ndarray, offsets: Optional[np.ndarray],
                   sweep: float, sample_gap: float = 5.0) -> Optional[np.ndarray]:
    """Replicate sample offsets along the velocity over sweep planning steps."""
    speed = float(np.hypot(velocity[0], velocity[1]))
    if sweep <= 0.0 or speed <= 0.0:
        return offsets
    n = int(math.ceil(sweep * speed / sample_gap)) + 1
    motion = np.linspace(0.0, sweep, n)[:, None] * velocity[None, :]
    base = np.zeros((1, 2)) if offsets is None else offsets
    return (motion[:, None, :] + base[None, :, :]).reshape(-1, 2)


@dataclass
class ObstacleState:
    center: np.ndarray         # (2,)
    velocity: np.ndarray       # (2,)
    altitude: float = 0.0
    sample_offsets: Optional[np.ndarray] = None

    def model(self, influence: float, sweep: float = 0.0) -> ObstacleModel:
        """Field-source view of this obstacle.

        With sweep > 0 the sample set is replicated along the velocity so the
        protection bubble covers every position the obstacle visits within
        that many planning steps, not just where it is now.  Without it a
        fast crosser can displace its bubble faster than a UAV hugging the
        bubble edge can react; sweeping the samples over the executed step
        restores the d_safe >= d_obs + step_len separation argument for
        moving obstacles.
        """
        speed = float(np.hypot(self.velocity[0], self.velocity[1]))
        offsets = _sweep_offsets(self.velocity, self.sample_offsets, sweep)
        return ObstacleModel(center=self.center.copy(), speed=speed,
                             influence=influence, sample_offsets=offsets,
                             altitude=self.altitude)

    def sample_points(self) -> np.ndarray:
        if self.sample_offsets is None:
            return self.center[None, :]
        return self.center[None, :] + self.sample_offsets


@dataclass
class World:
    config: ScenarioConfig
    uavs: list
    obstacles: list
    step_count: int = 0
    clear_streak: int = 0
    events: list = dc_field(default_factory=list)
    grid_hook: Optional[callable] = None   # called with (step, uav_idx, grid)


def _ring_offsets(radius: float, count: int) -> np.ndarray:
    ang = 2.0 * math.pi * np.arange(count) / count
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def build_world(config: ScenarioConfig) -> World:
    """Place the formation on the left edge and obstacles on intercept courses."""
    cfg = config
    center = np.array([cfg.spawn_x, cfg.arena_size / 2.0])
    ang = 2.0 * math.pi * np.arange(cfg.n_uavs) / cfg.n_uavs
    offsets = cfg.formation_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    uavs = []
    for i in range(cfg.n_uavs):
        pos = center + offsets[i]
        goal = np.array([cfg.arena_size + 2.0 * cfg.step_len, pos[1]])
        uavs.append(UavState(idx=i, position=pos.copy(), altitude=0.0,
                             home_altitude=0.0, heading=0.0, speed=cfg.swarm_speed,
                             start=pos.copy(), goal=goal))
    shape = _ring_offsets(cfg.shape_radius, cfg.shape_samples) if cfg.obstacle_shaped else None
    obstacles = []
    for j in range(cfg.n_obstacles):
        lateral = (j - (cfg.n_obstacles - 1) / 2.0) * 3.0 * cfg.d_safe
        if cfg.kind == "in_front":
            pos = center + np.array([cfg.approach_distance, lateral])
            vel = np.array([-cfg.obstacle_speed, 0.0])
        else:
            # meet the swarm where both arrive after the same flight time
            closing = math.hypot(cfg.swarm_speed, cfg.obstacle_speed)
            t_meet = cfg.approach_distance / closing
            pos = center + np.array([cfg.swarm_speed * t_meet + lateral,
                                     cfg.obstacle_speed * t_meet])
            vel = np.array([0.0, -cfg.obstacle_speed])
        obstacles.append(ObstacleState(center=pos, velocity=vel, altitude=0.0,
                                       sample_offsets=shape))
    return World(config=cfg, uavs=uavs, obstacles=obstacles)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _sub_seed(seed: int, stream: int, uav: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, stream, uav, step]).generate_state(1)[0])


def _stream_rng(seed: int, stream: int, uav: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, uav, step]))


def _uav_obstacle_distance(uav_pts, uav_alt, obs: ObstacleState, obs_pts) -> float:
    """Min 3-D surface distance between matched position samples."""
    best = math.inf
    for sample in obs_pts.transpose(1, 0, 2):   # (K, T, 2) -> per sample point
        d = np.hypot(uav_pts[:, 0] - sample[:, 0], uav_pts[:, 1] - sample[:, 1])
        dist = np.sqrt(d**2 + (uav_alt - obs.altitude) ** 2)
        best = min(best, float(dist.min()))
    return best


class _StepPaths:
    """Subsampled motion of every entity across one step, for distance metrics."""

    def __init__(self, n_sub: int = 11):
        self.fractions = np.linspace(0.0, 1.0, n_sub)
        self.uav_pts = {}
        self.uav_alt = {}

    def add_arc(self, uav: UavState, arc: ArcParams):
        self.uav_pts[uav.idx] = arc_points(arc, len(self.fractions))
        self.uav_alt[uav.idx] = uav.altitude

    def add_segment(self, uav: UavState, start: np.ndarray, end: np.ndarray):
        pts = start[None, :] + self.fractions[:, None] * (end - start)[None, :]
        self.uav_pts[uav.idx] = pts
        self.uav_alt[uav.idx] = uav.altitude

    def min_distances(self, world: World) -> tuple[float, float]:
        if not self.uav_pts:
            return math.inf, math.inf
        min_u2o = math.inf
        for obs in world.obstacles:
            centers = (obs.center[None, :]
                       + self.fractions[:, None] * obs.velocity[None, :])
            offs = (obs.sample_offsets if obs.sample_offsets is not None
                    else np.zeros((1, 2)))
            obs_pts = centers[:, None, :] + offs[None, :, :]   # (T, K, 2)
            for idx, pts in self.uav_pts.items():
                dist = _uav_obstacle_distance(pts, self.uav_alt[idx], obs, obs_pts)
                min_u2o = min(min_u2o, dist)
        min_u2u = math.inf
        ids = sorted(self.uav_pts)
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                d = np.hypot(self.uav_pts[i][:, 0] - self.uav_pts[j][:, 0],
                             self.uav_pts[i][:, 1] - self.uav_pts[j][:, 1])
                dz = self.uav_alt[i] - self.uav_alt[j]
                min_u2u = min(min_u2u, float(np.sqrt(d**2 + dz**2).min()))
        return min_u2o, min_u2u


def _sensed_obstacles(world: World) -> list:
    cfg = world.config
    out = []
    for obs in world.obstacles:
        pts = obs.sample_points()
        for uav in world.uavs:
            if uav.done:
                continue
            d = np.hypot(pts[:, 0] - uav.position[0], pts[:, 1] - uav.position[1])
            dist = np.sqrt(d**2 + (uav.altitude - obs.altitude) ** 2).min()
            if dist <= cfg.sensing_range:
                out.append(obs)
                break
    return out


def _closing_threat(world: World, active, sensed) -> bool:
    """True when an obstacle inside the trigger distance would come within
    d_safe of some UAV resuming its goalward course, within the prediction
    horizon.

    The closest approach is judged on the goalward course, not the instant
    heading, and that matters at both ends of an encounter.  Mid-pass the
    avoidance arc points away from the obstacle, so its straight-line miss
    looks safe even though the swarm turns back into the crossing as soon
    as the threat clears.  On the way out the contour cost is minimized on
    the protection bubble edge, so an obstacle that paces a UAV would stay
    a "closing" threat forever and drag that UAV along with it.
    """
    cfg = world.config
    horizon = float(cfg.predict_steps)
    for obs in sensed:
        pts = obs.sample_points()
        for uav in active:
            diff = pts - uav.position[None, :]
            d2 = np.hypot(diff[:, 0], diff[:, 1])
            k = int(np.argmin(d2))
            dz = uav.altitude - obs.altitude
            if math.hypot(float(d2[k]), dz) >= cfg.trigger_distance:
                continue
            to_goal = uav.goal - uav.position
            gn = float(np.hypot(to_goal[0], to_goal[1]))
            vel = uav.speed * to_goal / gn if gn > 1e-9 else np.zeros(2)
            rel_p = diff[k]
            rel_v = obs.velocity - vel
            vv = float(np.dot(rel_v, rel_v))
            t_star = 0.0 if vv < 1e-12 else -float(np.dot(rel_p, rel_v)) / vv
            t_star = min(max(t_star, 0.0), horizon)
            close = rel_p + t_star * rel_v
            if math.hypot(math.hypot(close[0], close[1]), dz) < cfg.d_safe:
                return True
    return False


def _min_u2o_now(world: World, obstacles=None) -> float:
    obstacles = world.obstacles if obstacles is None else obstacles
    best = math.inf
    for obs in obstacles:
        pts = obs.sample_points()
        for uav in world.uavs:
            if uav.done:
                continue
            d = np.hypot(pts[:, 0] - uav.position[0], pts[:, 1] - uav.position[1])
            dist = float(np.sqrt(d**2 + (uav.altitude - obs.altitude) ** 2).min())
            best = min(best, dist)
    return best


def _charge(uav: UavState, cfg: ScenarioConfig, length: float, turn: float,
            climb: float):
    uav.energy += (cfg.p_turn * cfg.mass * turn
                   + cfg.p_lift * cfg.mass * cfg.gravity * (length + climb)
                   + cfg.p_comms * length)


def _cruise_move(uav: UavState, cfg: ScenarioConfig, paths: _StepPaths, arc_row,
                 turn_row):
    to_goal = uav.goal - uav.position
    dist = float(np.hypot(to_goal[0], to_goal[1]))
    if dist < 1e-9:
        uav.done = True
        paths.add_segment(uav, uav.position.copy(), uav.position.copy())
        return
    heading = math.atan2(to_goal[1], to_goal[0])
    move = min(cfg.step_len, dist)
    start = uav.position.copy()
    uav.position = start + move * np.array([math.cos(heading), math.sin(heading)])
    turn = abs(_wrap(heading - uav.heading))
    uav.heading = heading
    arc_row[uav.idx] = (heading, 0.0)
    turn_row[uav.idx] += turn
    _charge(uav, cfg, move, turn, 0.0)
    paths.add_segment(uav, start, uav.position.copy())
    if uav.mode is Mode.RESUME and abs(uav.altitude - uav.home_altitude) < 1e-12:
        span = uav.goal - uav.start
        nrm = float(np.hypot(span[0], span[1]))
        if nrm > 1e-9:
            cross = abs((uav.position[0] - uav.start[0]) * span[1]
                        - (uav.position[1] - uav.start[1]) * span[0]) / nrm
            if cross < 0.5:
                uav.mode = Mode.CRUISE


def _restore_altitude(uav: UavState, cfg: ScenarioConfig, dalt_row, world: World,
                      reason: str):
    if abs(uav.altitude - uav.home_altitude) > 1e-12:
        change = uav.home_altitude - uav.altitude
        uav.altitude = uav.home_altitude
        dalt_row[uav.idx] += abs(change)
        _charge(uav, cfg, 0.0, 0.0, abs(change))
        world.events.append((world.step_count, "altitude_restore",
                             {"uav": uav.idx, "change": change, "reason": reason}))


def _cruise_deconflict(world: World, active, dalt_row):
    """Keep separation awareness outside Avoid mode.

    Cruise and resume steering is goal-directed, so returning UAVs can cut
    across teammates' lanes.  Every step their straight-line predictions are
    checked for separation conflicts; conflicting UAVs are scheduled onto
    offset altitudes and drop back once their paths have stayed clear for
    the hysteresis window.
    """
    cfg = world.config
    n_pts = cfg.predict_steps * int(round(cfg.step_len / cfg.spacing)) + 1
    trajs = []
    for uav in active:
        to_goal = uav.goal - uav.position
        dist = float(np.hypot(to_goal[0], to_goal[1]))
        if dist < 1e-9:
            direction = np.array([math.cos(uav.heading), math.sin(uav.heading)])
            dist = 0.0
        else:
            direction = to_goal / dist
        s = np.minimum(np.arange(n_pts) * cfg.spacing, dist)
        pts = uav.position[None, :] + s[:, None] * direction[None, :]
        trajs.append(Trajectory(points=pts, spacing=cfg.spacing,
                                step_len=cfg.step_len, n_steps=cfg.predict_steps))
    # planar conflicts gate the altitude restore (vertically separated pairs
    # must hold their offsets), 3-D conflicts gate new altitude planning
    planar = detect_conflicts(trajs, cfg.d_u2u)
    hold = set()
    if planar:
        for local, uav in enumerate(active):
            if local in planar.involved:
                hold.add(uav.idx)
                uav.alt_clear = 0
        order = [u.idx for u in active]
        conflicts = detect_conflicts(trajs, cfg.d_u2u,
                                     altitudes=[u.altitude for u in active])
        if conflicts:
            seeds = [_sub_seed(cfg.seed, _STREAM_ALTITUDE, order[i],
                               world.step_count)
                     for i in sorted(conflicts.involved)]
            plan = plan_altitude(
                conflicts, trajs, cfg.d_u2u, seeds, n_uavs=len(active),
                delta_max=cfg.delta_max,
                base_alts=[u.altitude for u in active],
                particles=cfg.pso_particles, iterations=cfg.pso_iterations,
                inertia=cfg.pso_inertia, cognitive=cfg.pso_cognitive,
                social=cfg.pso_social)
            if plan.fallback:
                world.events.append((world.step_count, "altitude_fallback",
                                     {"involved": list(plan.involved)}))
            for local, uav in enumerate(active):
                delta = float(plan.deltas[local])
                if abs(delta) > 1e-12:
                    uav.altitude += delta
                    dalt_row[uav.idx] += abs(delta)
                    _charge(uav, cfg, 0.0, 0.0, abs(delta))
                    world.events.append((world.step_count, "altitude_change",
                                         {"uav": uav.idx, "delta": delta}))
                    if uav.mode is Mode.CRUISE:
                        uav.mode = Mode.RESUME
    for uav in active:
        if uav.idx in hold:
            continue
        if abs(uav.altitude - uav.home_altitude) > 1e-12:
            uav.alt_clear += 1
            if uav.alt_clear >= cfg.resume_steps:
                _restore_altitude(uav, cfg, dalt_row, world, "clear")
                uav.alt_clear = 0


def _keep_out_set(active, sensed, d_safe: float):
    """Swept obstacle samples plus per-UAV clearance radii for the level search.

    Each radius is the protection distance shrunk by the vertical gap between
    the UAV's plane and the obstacle's, so a plane change relaxes the planar
    constraint and a gap of d_safe or more removes it.
    """
    if not sensed:
        return None, None
    pts = []
    alts = []
    for obs in sensed:
        off = _sweep_offsets(obs.velocity, obs.sample_offsets, 1.0)
        p = obs.center[None, :] if off is None else obs.center[None, :] + off
        pts.append(p)
        alts.append(np.full(len(p), obs.altitude))
    pts = np.concatenate(pts, axis=0)
    dz = np.array([u.altitude for u in active])[:, None] - np.concatenate(alts)
    return pts, np.sqrt(np.maximum(d_safe**2 - dz**2, 0.0))


def _plan_levels(world: World, active, grids, preds, weights, sensed,
                 extra_keep=None, stream_id: int = _STREAM_LEVEL):
    """Lockstep level search for all active UAVs, isolating per-UAV failures.

    extra_keep adds (points, per-UAV radii) to the obstacle keep-out, used
    when re-planning around a teammate's already-fixed arc.
    """
    cfg = world.config
    keep_pts, keep_radii = _keep_out_set(active, sensed, cfg.d_safe)
    if extra_keep is not None:
        pts2 = np.asarray(extra_keep[0], dtype=float)
        radii2 = np.broadcast_to(np.asarray(extra_keep[1], dtype=float),
                                 (len(active), len(pts2)))
        if keep_pts is None:
            keep_pts, keep_radii = pts2, radii2
        else:
            keep_pts = np.concatenate([keep_pts, pts2])
            keep_radii = np.concatenate([keep_radii, radii2], axis=1)

    def stream(uav):
        return _stream_rng(cfg.seed, stream_id, uav.idx, world.step_count)

    kwargs = dict(step_len=cfg.step_len, spacing=cfg.spacing,
                  kappa_max=cfg.kappa_max, init_sigma=cfg.pso_init_sigma,
                  particles=cfg.pso_particles, iterations=cfg.pso_iterations,
                  inertia=cfg.pso_inertia, cognitive=cfg.pso_cognitive,
                  social=cfg.pso_social, keep_out=keep_pts,
                  goal_pull=cfg.goal_pull)
    try:
        return plan_level_many([u.position for u in active],
                               [u.heading for u in active],
                               [grids[u.idx] for u in active],
                               [preds[u.idx] for u in active],
                               weights, [stream(u) for u in active],
                               keep_radii=keep_radii,
                               goals=[u.goal for u in active], **kwargs)
    except Exception:   # noqa: BLE001 - rerun solo to isolate the failing UAV
        pass
    arcs = []
    for i, uav in enumerate(active):
        try:
            arcs.append(plan_level(uav.position, uav.heading, grids[uav.idx],
                                   preds[uav.idx], weights, stream(uav),
                                   keep_radii=None if keep_radii is None
                                   else keep_radii[i], goal=uav.goal,
                                   **kwargs))
        except Exception as exc:   # noqa: BLE001 - fall back to heading hold
            arcs.append(ArcParams(heading=uav.heading, curvature=0.0,
                                  origin=uav.position.copy(),
                                  step_len=cfg.step_len))
            world.events.append((world.step_count, "planner_failure",
                                 {"uav": uav.idx, "error": repr(exc)}))
    return arcs


def _deconflict_arcs(world: World, active, arcs, grids, preds, weights,
                     sensed):
    """Re-plan arcs that would pass within d_u2u of a teammate mid-step.

    Escaping UAVs are fixed first, then planners by index; each UAV keeps
    out of every already-fixed arc, so the pass leaves all pairs separated
    whenever the search can manage it.  Danger is judged on same-numbered
    nodes, which equal speeds make simultaneous; the re-plan keeps out of
    the whole fixed path, a stricter but simpler condition.
    """
    cfg = world.config
    n = int(round(cfg.step_len / cfg.spacing)) + 1
    margin = cfg.d_u2u + cfg.spacing   # node sampling can hide up to a gap
    order = sorted(active, key=lambda u: (not u.escaping, u.idx))
    nodes = {u.idx: arc_points(arcs[u.idx], n) for u in active}
    for i, uav in enumerate(order[1:], start=1):
        if uav.escaping:
            continue
        fixed = order[:i]
        paths = np.stack([nodes[v.idx] for v in fixed])
        dz = np.array([uav.altitude - v.altitude for v in fixed])
        gap = nodes[uav.idx][None, :, :] - paths
        worst = float(np.hypot(np.hypot(gap[..., 0], gap[..., 1]),
                               dz[:, None]).min())
        if worst >= margin:
            continue
        radii = np.sqrt(np.maximum(margin**2 - np.repeat(dz, n) ** 2, 0.0))
        arcs[uav.idx] = _plan_levels(
            world, [uav], grids, preds, weights, sensed,
            extra_keep=(paths.reshape(-1, 2), radii[None, :]),
            stream_id=_STREAM_ARC_FIX)[0]
        nodes[uav.idx] = arc_points(arcs[uav.idx], n)
        world.events.append((world.step_count, "arc_deconflict",
                             {"uav": uav.idx, "min_dist": worst}))


def _threat_clearance(uav: UavState, sensed, sweep: float = 0.0) -> float:
    """Min 3-D distance from the UAV to obstacle samples.  sweep > 0 extends
    the samples along each obstacle's motion."""
    best = math.inf
    for obs in sensed:
        off = _sweep_offsets(obs.velocity, obs.sample_offsets, sweep)
        pts = obs.center[None, :] if off is None else obs.center[None, :] + off
        d2 = np.hypot(pts[:, 0] - uav.position[0], pts[:, 1] - uav.position[1])
        d3 = np.sqrt(d2**2 + (uav.altitude - obs.altitude) ** 2)
        best = min(best, float(d3.min()))
    return best


def _escape_arc(uav: UavState, cfg: ScenarioConfig, sensed,
                mate_paths=None) -> ArcParams:
    """Straight step with the largest threat clearance within the turn bound.

    Inside the protection bubble the plateau hides the obstacle from the
    contour cost, so the planner cannot be trusted there.  Candidate
    headings within the quarter-turn clamp are scored by their end
    position's distance to the obstacle samples swept two steps ahead,
    which covers the obstacle's motion through this step and the next;
    fleeing radially would keep a head-on encounter on its collision axis.

    mate_paths lists (points, altitude) of teammate escape arcs already
    fixed this step; their distances count toward the score shifted by
    d_safe - d_u2u, so a teammate at the separation floor repels exactly as
    hard as an obstacle sample at the bubble surface.
    """
    deltas = np.linspace(-math.pi / 2, math.pi / 2, 41)
    deltas = deltas[np.argsort(np.abs(deltas), kind="stable")]
    headings = uav.heading + deltas
    ends = uav.position[None, :] + cfg.step_len * np.stack(
        [np.cos(headings), np.sin(headings)], axis=1)
    best = np.full(len(deltas), np.inf)
    for obs in sensed:
        off = _sweep_offsets(obs.velocity, obs.sample_offsets, 2.0)
        pts = obs.center[None, :] if off is None else obs.center[None, :] + off
        gap = pts[:, None, :] - ends[None, :, :]            # (K, C, 2)
        d2 = np.hypot(gap[..., 0], gap[..., 1])
        d3 = np.hypot(d2, uav.altitude - obs.altitude)
        np.minimum(best, d3.min(axis=0), out=best)
    for pts, alt in (mate_paths or ()):
        gap = pts[:, None, :] - ends[None, :, :]
        d2 = np.hypot(gap[..., 0], gap[..., 1])
        d3 = np.hypot(d2, uav.altitude - alt) + (cfg.d_safe - cfg.d_u2u)
        np.minimum(best, d3.min(axis=0), out=best)
    pick = int(np.argmax(best))   # deltas sorted by turn size: ties turn least
    return ArcParams(heading=_wrap(float(headings[pick])), curvature=0.0,
                     origin=uav.position.copy(), step_len=cfg.step_len)


def _plan_avoid(world: World, active, sensed, arc_row, dalt_row, turn_row,
                paths: _StepPaths):
    """Run the full pipeline for one Avoid step; returns conflict flag."""
    cfg = world.config
    positions = np.array([u.position for u in active])
    goals = np.array([u.goal for u in active])
    target = goals.mean(axis=0)
    center, _ = conceptual_center(positions, target, cfg.step_len)
    env = EnvironmentField(
        swarm=SwarmFieldSpec(center=center, speed=cfg.swarm_speed,
                             influence=cfg.swarm_influence),
        obstacles=[o.model(cfg.obstacle_influence, sweep=1.0) for o in sensed],
        d_safe=cfg.d_safe,
        altitude_exclusion=cfg.alt_exclusion,
    )
    horizon = cfg.predict_steps * cfg.step_len
    margin = horizon + cfg.d_safe + 5.0 * cfg.grid_cell
    bounds = (positions[:, 0].min() - margin, positions[:, 0].max() + margin,
              positions[:, 1].min() - margin, positions[:, 1].max() + margin)
    xs, ys = _node_axes(bounds, cfg.grid_cell)
    origin = (xs[0], ys[0])
    plane_phi = {}

    def grids_for(uavs):
        # one smoothing pass per altitude plane, one grid per UAV level
        by_plane = {}
        for uav in uavs:
            by_plane.setdefault(round(uav.altitude, 6), []).append(uav)
        for key, group in by_plane.items():
            if key not in plane_phi:
                plane_phi[key] = _intensity_on_axes(env, xs, ys,
                                                    group[0].altitude)
            refs = [float(environment_intensity(u.position, env, u.altitude))
                    for u in group]
            built = grids_from_intensity_multi(plane_phi[key], origin,
                                               cfg.grid_cell, refs,
                                               cfg.smooth_sigma)
            for uav, grid in zip(group, built):
                grids[uav.idx] = grid
                if world.grid_hook is not None:
                    world.grid_hook(world.step_count, uav.idx, grid)

    n_pts = cfg.predict_steps * int(round(cfg.step_len / cfg.spacing)) + 1
    system = build_el_system(n_pts, cfg.energy_weight)
    grids = {}
    preds = {}

    def predict_for(uavs):
        grids_for(uavs)
        inits = []
        for uav in uavs:
            vel = uav.speed * np.array([math.cos(uav.heading),
                                        math.sin(uav.heading)])
            inits.append(init_prediction(uav.position, vel, cfg.predict_steps,
                                         cfg.step_len, cfg.spacing))
        results = predict_batch(inits, system, [grids[u.idx] for u in uavs],
                                max_iter=cfg.predict_max_iter,
                                tol=cfg.predict_tol)
        for uav, res in zip(uavs, results):
            preds[uav.idx] = res
            if res.failed:
                world.events.append((world.step_count, "prediction_failure",
                                     {"uav": uav.idx}))

    predict_for(active)

    order = [u.idx for u in active]
    trajs = [preds[i].trajectory for i in order]
    conflicts = detect_conflicts(trajs, cfg.d_u2u,
                                 altitudes=[u.altitude for u in active])
    if conflicts:
        seeds = [_sub_seed(cfg.seed, _STREAM_ALTITUDE, order[i], world.step_count)
                 for i in sorted(conflicts.involved)]
        plan = plan_altitude(
            conflicts, trajs, cfg.d_u2u, seeds, n_uavs=len(active),
            delta_max=cfg.delta_max,
            base_alts=[u.altitude for u in active],
            particles=cfg.pso_particles, iterations=cfg.pso_iterations,
            inertia=cfg.pso_inertia, cognitive=cfg.pso_cognitive,
            social=cfg.pso_social)
        if plan.fallback:
            world.events.append((world.step_count, "altitude_fallback",
                                 {"involved": list(plan.involved)}))
        moved = []
        for local, uav in enumerate(active):
            delta = float(plan.deltas[local])
            if abs(delta) > 1e-12:
                uav.altitude += delta
                dalt_row[uav.idx] += abs(delta)   # climb energy charged with the move
                world.events.append((world.step_count, "altitude_change",
                                     {"uav": uav.idx, "delta": delta}))
                moved.append(uav)
        if moved:
            predict_for(moved)   # plane changed: new contour, new prediction

    weights = cfg.cost_weights()
    # a UAV inside the swept bubble cannot start a feasible arc, so it
    # escapes instead of planning; gating on the same swept geometry the
    # planner constrains against also breaks stern chases, where the bubble
    # re-catches a fleeing UAV every step and level planning never frees it.
    # release needs a full step of slack on top, or the handback oscillates:
    # one planner arc ends near the bubble again and the next step re-enters
    clearances = [_threat_clearance(u, sensed, sweep=1.0) for u in active]
    release = cfg.d_safe + cfg.step_len
    for uav, clearance in zip(active, clearances):
        uav.escaping = clearance < cfg.d_safe or (uav.escaping
                                                  and clearance < release)
    planners = [u for u in active if not u.escaping]
    arcs = dict(zip((u.idx for u in planners),
                    _plan_levels(world, planners, grids, preds, weights,
                                 sensed)
                    if planners else ()))
    fixed_paths = []
    for uav, clearance in zip(active, clearances):
        if uav.escaping:
            arc = _escape_arc(uav, cfg, sensed, fixed_paths or None)
            fixed_paths.append((arc_points(arc, 3), uav.altitude))
            arcs[uav.idx] = arc
            world.events.append((world.step_count, "emergency_escape",
                                 {"uav": uav.idx, "clearance": clearance}))
    if len(active) > 1:
        _deconflict_arcs(world, active, arcs, grids, preds, weights, sensed)
    for uav in active:
        arc = arcs[uav.idx]
        paths.add_arc(uav, arc)
        arc_row[uav.idx] = (arc.heading, arc.curvature)
        end = paths.uav_pts[uav.idx][-1]
        junction = abs(_wrap(arc.heading - uav.heading))
        turn = abs(arc.curvature) * cfg.step_len + junction
        climb = dalt_row[uav.idx]
        uav.position = end.copy()
        uav.heading = _wrap(arc.end_heading())
        turn_row[uav.idx] += turn
        _charge(uav, cfg, cfg.step_len, turn, climb)
    return bool(conflicts)


def _baseline_move(world: World, active, sensed, paths: _StepPaths, arc_row,
                   turn_row):
    """Naive virtual-force step: ride the blended goal and field forces."""
    cfg = world.config
    positions = np.array([u.position for u in active])
    goals = np.array([u.goal for u in active])
    center, _ = conceptual_center(positions, goals.mean(axis=0), cfg.step_len)
    env = EnvironmentField(
        swarm=SwarmFieldSpec(center=center, speed=cfg.swarm_speed,
                             influence=cfg.swarm_influence),
        obstacles=[o.model(cfg.obstacle_influence, sweep=1.0) for o in sensed],
        d_safe=cfg.d_safe,
        altitude_exclusion=cfg.alt_exclusion,
    )
    for uav in active:
        to_goal = uav.goal - uav.position
        nrm = float(np.hypot(to_goal[0], to_goal[1]))
        force = np.zeros(2) if nrm < 1e-9 else cfg.baseline_goal_weight * to_goal / nrm
        force = force - cfg.baseline_repulse_weight * field_gradient(
            uav.position, env, uav.altitude)
        fn = float(np.hypot(force[0], force[1]))
        heading = uav.heading if fn < 1e-12 else math.atan2(force[1], force[0])
        start = uav.position.copy()
        move = min(cfg.step_len, nrm) if nrm > 1e-9 else 0.0
        uav.position = start + move * np.array([math.cos(heading), math.sin(heading)])
        turn = abs(_wrap(heading - uav.heading))
        uav.heading = heading
        arc_row[uav.idx] = (heading, 0.0)
        turn_row[uav.idx] += turn
        _charge(uav, cfg, move, turn, 0.0)
        paths.add_segment(uav, start, uav.position.copy())


def step_world(world: World) -> dict:
    """Advance the world one step; returns the per-step log row."""
    cfg = world.config
    n = cfg.n_uavs
    active = [u for u in world.uavs if not u.done]
    arc_row = {u.idx: (u.heading, 0.0) for u in world.uavs}
    dalt_row = np.zeros(n)
    turn_row = np.zeros(n)
    paths = _StepPaths()
    plan_time = math.nan
    conflicts = False

    sensed = _sensed_obstacles(world)
    min_u2o_now = _min_u2o_now(world, sensed) if sensed else math.inf

    if cfg.planner == "baseline":
        if active:
            _baseline_move(world, active, sensed, paths, arc_row, turn_row)
    elif active:
        threat = _closing_threat(world, active, sensed) if sensed else False
        if threat and any(u.mode is not Mode.AVOID for u in active):
            for u in active:
                u.mode = Mode.AVOID
            world.clear_streak = 0
            world.events.append((world.step_count, "avoid_trigger",
                                 {"min_u2o": min_u2o_now}))
        if any(u.mode is Mode.AVOID for u in active):
            t0 = time.perf_counter()
            conflicts = _plan_avoid(world, active, sensed, arc_row, dalt_row,
                                    turn_row, paths)
            plan_time = time.perf_counter() - t0
            clear = not threat and not conflicts
            world.clear_streak = world.clear_streak + 1 if clear else 0
            if world.clear_streak >= cfg.resume_steps:
                for u in active:
                    u.mode = Mode.RESUME
                    u.escaping = False
                    _restore_altitude(u, cfg, dalt_row, world, "resume")
                world.events.append((world.step_count, "resume", {}))
                world.clear_streak = 0
        else:
            if len(active) >= 2:
                _cruise_deconflict(world, active, dalt_row)
            for u in active:
                _cruise_move(u, cfg, paths, arc_row, turn_row)
    min_u2o, min_u2u = paths.min_distances(world)

    for u in world.uavs:
        if not u.done and u.position[0] >= cfg.arena_size:
            _restore_altitude(u, cfg, dalt_row, world, "arena_exit")
            u.done = True
            u.mode = Mode.CRUISE

    for obs in world.obstacles:
        obs.center = obs.center + obs.velocity

    row = {
        "positions": np.array([[u.position[0], u.position[1], u.altitude]
                               for u in world.uavs]),
        "modes": np.array([int(u.mode) for u in world.uavs], dtype=np.int8),
        "arcs": np.array([arc_row[i] for i in range(n)]),
        "dalt": dalt_row,
        "turns": turn_row,
        "energy": np.array([u.energy for u in world.uavs]),
        "obstacles": np.array([o.center for o in world.obstacles]),
        "min_u2o": min_u2o,
        "min_u2u": min_u2u,
        "plan_time": plan_time,
        "conflicts": conflicts,
    }
    world.step_count += 1
    return row


@dataclass(frozen=True, eq=False)
class RunLog:
    """Complete record of one run; identical for identical configs and seeds."""

    config: ScenarioConfig
    start_positions: np.ndarray   # (N, 3)
    positions: np.ndarray         # (T, N, 3)
    modes: np.ndarray             # (T, N)
    arcs: np.ndarray              # (T, N, 2) executed (heading, curvature)
    dalt: np.ndarray              # (T, N) absolute altitude change per step
    turns: np.ndarray             # (T, N) heading change charged per step, rad
    energy: np.ndarray            # (T, N) cumulative energy
    obstacles: np.ndarray         # (T, M, 2)
    min_u2o: np.ndarray           # (T,)
    min_u2u: np.ndarray           # (T,)
    plan_times: np.ndarray        # (T,) wall-clock seconds, nan outside Avoid
    events: tuple
    completed: bool

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]


def run_scenario(config: ScenarioConfig, grid_hook=None) -> RunLog:
    """Run one encounter to completion or the step cap."""
    world = build_world(config)
    world.grid_hook = grid_hook
    start = np.array([[u.position[0], u.position[1], u.altitude]
                      for u in world.uavs])
    rows = []
    while world.step_count < config.max_steps:
        rows.append(step_world(world))
        if all(u.done for u in world.uavs):
            break
    completed = all(u.done for u in world.uavs)
    return RunLog(
        config=config,
        start_positions=start,
        positions=np.array([r["positions"] for r in rows]),
        modes=np.array([r["modes"] for r in rows]),
        arcs=np.array([r["arcs"] for r in rows]),
        dalt=np.array([r["dalt"] for r in rows]),
        turns=np.array([r["turns"] for r in rows]),
        energy=np.array([r["energy"] for r in rows]),
        obstacles=np.array([r["obstacles"] for r in rows]),
        min_u2o=np.array([r["min_u2o"] for r in rows]),
        min_u2u=np.array([r["min_u2u"] for r in rows]),
        plan_times=np.array([r["plan_time"] for r in rows]),
        events=tuple(world.events),
        completed=completed,
    )


def compute_metrics(log: RunLog) -> dict:
    """Headline numbers for one run; keys are stable across the toolchain."""
    cfg = log.config
    finite_u2o = log.min_u2o[np.isfinite(log.min_u2o)]
    finite_u2u = log.min_u2u[np.isfinite(log.min_u2u)]
    min_u2o = float(finite_u2o.min()) if finite_u2o.size else math.inf
    min_u2u = float(finite_u2u.min()) if finite_u2u.size else math.inf
    energy = [float(e) for e in log.energy[-1]] if log.n_steps else [0.0] * cfg.n_uavs
    times = log.plan_times[np.isfinite(log.plan_times)]
    collision = bool(min_u2o < cfg.d_obs - 1e-9 or min_u2u < cfg.d_u2u - 1e-9)
    return {
        "min_u2o_m": min_u2o,
        "min_u2u_m": min_u2u,
        "energy_per_uav_j": energy,
        "total_energy_j": float(sum(energy)),
        "collision": collision,
        "mean_plan_time_s": float(times.mean()) if times.size else 0.0,
        "seed": cfg.seed,
    }
