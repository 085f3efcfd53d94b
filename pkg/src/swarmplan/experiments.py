"""Repeatable studies on top of the pipeline.

Two entry points matter operationally: a planner comparison that replays the
same encounters with the maneuver pipeline and with the naive virtual-force
follower, and an initialization ablation that measures how often a level
search starting from scratch falls into the wrong basin of a two-obstacle
cost landscape compared to one warm-started from the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .cost import CostWeights, level_cost
from .field import (
    EnvironmentField,
    GradientGrid,
    ObstacleModel,
    SwarmFieldSpec,
    build_gradient_grid,
)
from .plan import PsoConfig, arc_points_batch, fit_arc, pso_minimize
from .predict import build_el_system, init_prediction, predict_trajectory
from .sim import ScenarioConfig, compute_metrics, run_scenario

__all__ = [
    "AblationFixture",
    "ablation_fixture",
    "level_oracle",
    "level_search",
    "ablation_study",
    "compare_planners",
    "summarize_metrics",
]


@dataclass(frozen=True)
class AblationFixture:
    """A frozen planning instance with one broad and one narrow cost basin."""

    position: np.ndarray
    heading: float
    grid: GradientGrid
    weights: CostWeights
    step_len: float
    spacing: float
    kappa_max: float
    predict_steps: int


def ablation_fixture(near_offset=(38.0, 14.0), far_offset=(44.0, -26.0),
                     step_len: float = 10.0, spacing: float = 1.0,
                     kappa_max: float = 0.2, energy_weight: float = 0.5,
                     d_safe: float = 20.0, predict_steps: int = 10) -> AblationFixture:
    """Two static obstacles ahead of a UAV at the origin heading +x.

    The swarm bump is pushed out of range so the landscape is set purely by
    the two obstacle bumps: skirting the near bubble is a broad shallow
    basin, threading between the bubbles a narrow deep one.
    """
    position = np.array([0.0, 0.0])
    obstacles = [
        ObstacleModel(center=np.asarray(near_offset, dtype=float), speed=0.0),
        ObstacleModel(center=np.asarray(far_offset, dtype=float), speed=0.0),
    ]
    env = EnvironmentField(
        swarm=SwarmFieldSpec(center=np.array([-50.0, 0.0]), speed=10.0,
                             influence=1.0),
        obstacles=obstacles,
        d_safe=d_safe,
    )
    horizon = predict_steps * step_len
    margin = horizon + d_safe + 5.0
    bounds = (position[0] - margin, position[0] + margin,
              position[1] - margin, position[1] + margin)
    grid = build_gradient_grid(env, position, bounds, cell_size=1.0,
                               horizon=horizon)
    return AblationFixture(
        position=position, heading=0.0, grid=grid,
        weights=CostWeights(energy=energy_weight, safety=1.0 - energy_weight),
        step_len=step_len, spacing=spacing, kappa_max=kappa_max,
        predict_steps=predict_steps,
    )


def _arc_cost_fn(fixture: AblationFixture):
    n = int(round(fixture.step_len / fixture.spacing)) + 1

    def cost_fn(x):
        pts = arc_points_batch(x[:, 0], x[:, 1], fixture.position,
                               fixture.step_len, n)
        return level_cost(pts, fixture.grid, fixture.weights, fixture.spacing)

    return cost_fn


def _search_bounds(fixture: AblationFixture) -> np.ndarray:
    return np.array([
        [fixture.heading - math.pi / 2.0, fixture.heading + math.pi / 2.0],
        [-fixture.kappa_max, fixture.kappa_max],
    ])


def level_oracle(fixture: AblationFixture, resolution: tuple = (200, 200)) -> dict:
    """Dense grid search over (heading, curvature); the reference optimum."""
    bounds = _search_bounds(fixture)
    omegas = np.linspace(bounds[0, 0], bounds[0, 1], resolution[0])
    kappas = np.linspace(bounds[1, 0], bounds[1, 1], resolution[1])
    om, ka = np.meshgrid(omegas, kappas, indexing="ij")
    flat = np.stack([om.ravel(), ka.ravel()], axis=1)
    cost_fn = _arc_cost_fn(fixture)
    costs = cost_fn(flat).reshape(om.shape)
    best = int(np.argmin(costs))
    bi, bj = np.unravel_index(best, costs.shape)
    return {
        "omegas": omegas,
        "kappas": kappas,
        "costs": costs,
        "best_cost": float(costs[bi, bj]),
        "best_omega": float(omegas[bi]),
        "best_kappa": float(kappas[bj]),
    }


def _prediction_center(fixture: AblationFixture) -> np.ndarray:
    vel = np.array([math.cos(fixture.heading), math.sin(fixture.heading)])
    init = init_prediction(fixture.position, vel, fixture.predict_steps,
                           fixture.step_len, fixture.spacing)
    system = build_el_system(len(init), fixture.weights.energy)
    pred = predict_trajectory(init, system, fixture.grid)
    n = int(round(fixture.step_len / fixture.spacing)) + 1
    om, ka = fit_arc(pred.trajectory.points[:n])
    om += 2.0 * math.pi * round((fixture.heading - om) / (2.0 * math.pi))
    return np.array([om, ka])


def level_search(fixture: AblationFixture, seed: int, init: str = "prediction",
                 init_sigma: float = 1.0, particles: int = 30,
                 iterations: int = 50) -> float:
    """One PSO level search on the fixture; returns the final best cost.

    init="prediction" scatters particles around the arc fitted to the
    relaxed prediction; init="uniform" draws them uniformly over the bounds.
    """
    bounds = _search_bounds(fixture)
    config = PsoConfig(bounds=bounds, particles=particles, iterations=iterations)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    if init == "prediction":
        center = np.clip(_prediction_center(fixture), bounds[:, 0], bounds[:, 1])
        starts = center[None, :] + init_sigma * rng.normal(size=(particles, 2))
    elif init == "uniform":
        starts = rng.uniform(bounds[:, 0], bounds[:, 1], size=(particles, 2))
    else:
        raise ValueError(f"unknown init mode {init!r}")
    result = pso_minimize(_arc_cost_fn(fixture), config, rng,
                          init_positions=np.clip(starts, bounds[:, 0], bounds[:, 1]))
    return float(result.cost)


def ablation_study(trials: int = 500, fixture: Optional[AblationFixture] = None,
                   trap_margin: float = 0.05,
                   oracle_resolution: tuple = (200, 200)) -> dict:
    """Trap statistics for uniform vs prediction-seeded level searches.

    A search is trapped when its final cost misses the oracle optimum by
    more than trap_margin of the optimum's magnitude.
    """
    fixture = fixture or ablation_fixture()
    oracle = level_oracle(fixture, oracle_resolution)
    best = oracle["best_cost"]
    tol = trap_margin * abs(best)
    out = {"trials": trials, "oracle_cost": best, "trap_margin": trap_margin}
    for mode in ("uniform", "prediction"):
        costs = np.array([level_search(fixture, seed, init=mode)
                          for seed in range(trials)])
        gaps = costs - best
        out[f"trap_rate_{mode}"] = float((gaps > tol).mean())
        out[f"mean_gap_{mode}"] = float(gaps.mean())
        out[f"mean_cost_{mode}"] = float(costs.mean())
    return out


def summarize_metrics(metrics: Sequence[dict]) -> dict:
    """Aggregate per-run metric dicts into one summary row."""
    if not metrics:
        return {"n_runs": 0}
    return {
        "n_runs": len(metrics),
        "collisions": int(sum(m["collision"] for m in metrics)),
        "min_u2o_m": float(min(m["min_u2o_m"] for m in metrics)),
        "min_u2u_m": float(min(m["min_u2u_m"] for m in metrics)),
        "mean_total_energy_j": float(np.mean([m["total_energy_j"] for m in metrics])),
        "mean_plan_time_s": float(np.mean([m["mean_plan_time_s"] for m in metrics])),
    }


def compare_planners(config: ScenarioConfig, seeds: Sequence[int]) -> dict:
    """Replay the same encounters with both planners and relate their energy."""
    arms = {}
    for planner in ("main", "baseline"):
        metrics = []
        incomplete = 0
        for seed in seeds:
            cfg = replace(config, planner=planner, seed=int(seed))
            log = run_scenario(cfg)
            if not log.completed:
                incomplete += 1
            metrics.append(compute_metrics(log))
        arms[planner] = {
            "summary": summarize_metrics(metrics),
            "incomplete_runs": incomplete,
            "per_seed": metrics,
        }
    main_e = arms["main"]["summary"]["mean_total_energy_j"]
    base_e = arms["baseline"]["summary"]["mean_total_energy_j"]
    return {
        "seeds": [int(s) for s in seeds],
        "main": arms["main"],
        "baseline": arms["baseline"],
        "energy_ratio_main_over_baseline": (main_e / base_e if base_e > 0 else math.inf),
    }
