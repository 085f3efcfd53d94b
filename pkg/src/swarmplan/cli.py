"""Command line front end: run encounters, compare planners, ablate, export fields.

Configuration is plain text, one `section.key = value` per line, applied over
the built-in defaults.  Environment variables with the SWARMPLAN_ prefix
override file values (SWARMPLAN_SCENARIO_KIND=on_side matches scenario.kind);
command line flags override both.  Unknown keys are rejected by name.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import typing
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .experiments import ablation_study, compare_planners, summarize_metrics
from .field import export_grid_csv
from .sim import Mode, RunLog, ScenarioConfig, compute_metrics, run_scenario

ENV_PREFIX = "SWARMPLAN_"

# dotted config key -> ScenarioConfig field
CONFIG_KEYS = {
    "scenario.kind": "kind",
    "scenario.n_uavs": "n_uavs",
    "scenario.formation_radius": "formation_radius",
    "scenario.arena_size": "arena_size",
    "scenario.spawn_x": "spawn_x",
    "scenario.approach_distance": "approach_distance",
    "scenario.n_obstacles": "n_obstacles",
    "scenario.obstacle_speed": "obstacle_speed",
    "scenario.obstacle_shaped": "obstacle_shaped",
    "scenario.shape_radius": "shape_radius",
    "scenario.shape_samples": "shape_samples",
    "safety.sensing_range": "sensing_range",
    "safety.trigger_distance": "trigger_distance",
    "safety.d_safe": "d_safe",
    "safety.d_obs": "d_obs",
    "safety.d_u2u": "d_u2u",
    "safety.resume_steps": "resume_steps",
    "motion.swarm_speed": "swarm_speed",
    "motion.step_len": "step_len",
    "motion.spacing": "spacing",
    "motion.kappa_max": "kappa_max",
    "motion.delta_max": "delta_max",
    "field.swarm_influence": "swarm_influence",
    "field.obstacle_influence": "obstacle_influence",
    "field.altitude_exclusion": "altitude_exclusion",
    "field.grid_cell": "grid_cell",
    "field.smooth_sigma": "smooth_sigma",
    "cost.energy_weight": "energy_weight",
    "cost.safety_weight": "safety_weight",
    "cost.goal_pull": "goal_pull",
    "cost.p_turn": "p_turn",
    "cost.p_lift": "p_lift",
    "cost.p_comms": "p_comms",
    "cost.mass": "mass",
    "cost.gravity": "gravity",
    "predict.steps": "predict_steps",
    "predict.max_iter": "predict_max_iter",
    "predict.tol": "predict_tol",
    "pso.particles": "pso_particles",
    "pso.iterations": "pso_iterations",
    "pso.inertia": "pso_inertia",
    "pso.cognitive": "pso_cognitive",
    "pso.social": "pso_social",
    "pso.init_sigma": "pso_init_sigma",
    "baseline.goal_weight": "baseline_goal_weight",
    "baseline.repulse_weight": "baseline_repulse_weight",
    "run.seed": "seed",
    "run.planner": "planner",
    "run.max_steps": "max_steps",
}

_FIELD_TYPES = {f.name: f.type for f in fields(ScenarioConfig)}


class ConfigError(ValueError):
    pass


def _coerce(dotted: str, raw: str):
    field_name = CONFIG_KEYS[dotted]
    hint = typing.get_type_hints(ScenarioConfig)[field_name]
    optional = typing.get_origin(hint) is typing.Union
    if optional:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.strip().lower() in ("none", "null", ""):
            return None
        hint = args[0]
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {dotted}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines into ScenarioConfig overrides."""
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        overrides[CONFIG_KEYS[key]] = _coerce(key, raw)
    return overrides


def _env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    env_to_key = {ENV_PREFIX + k.upper().replace(".", "_"): k for k in CONFIG_KEYS}
    out = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in env_to_key:
            raise ConfigError(f"unknown environment override {name}")
        dotted = env_to_key[name]
        out[CONFIG_KEYS[dotted]] = _coerce(dotted, raw)
    return out


def load_config(path=None, environ=None) -> ScenarioConfig:
    """Defaults, then config file, then SWARMPLAN_* environment overrides."""
    overrides = {}
    if path is not None:
        text = Path(path).read_text()
        overrides.update(parse_config_text(text, source=str(path)))
    overrides.update(_env_overrides(environ))
    return ScenarioConfig(**overrides)


def parse_seeds(spec: str) -> list:
    """'8' means seeds 0..7; '3,5,9' means exactly those seeds."""
    spec = spec.strip()
    if "," in spec:
        return [int(tok) for tok in spec.split(",") if tok.strip()]
    count = int(spec)
    if count < 1:
        raise ConfigError(f"seed count must be positive, got {count}")
    return list(range(count))


def write_run_csv(log: RunLog, path):
    """Per-step trajectory table; fixed six-decimal formatting."""
    with open(path, "w") as fh:
        fh.write("step,uav_id,x,y,z,omega,kappa,mode,energy_cum\n")
        for t in range(log.n_steps):
            for i in range(log.config.n_uavs):
                x, y, z = log.positions[t, i]
                om, ka = log.arcs[t, i]
                fh.write(f"{t},{i},{x:.6f},{y:.6f},{z:.6f},{om:.6f},{ka:.6f},"
                         f"{int(log.modes[t, i])},{log.energy[t, i]:.6f}\n")


def _write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_echo(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)


def _grid_dump_hook(out_dir: Path, seen: dict):
    def hook(step: int, uav: int, grid):
        first = seen.setdefault("step", step)
        if step != first:
            return
        for layer in ("intensity", "binary", "external"):
            export_grid_csv(grid, layer,
                            out_dir / f"grid_step{step}_uav{uav}_{layer}.csv")
    return hook


def cmd_run(args) -> int:
    base = load_config(args.config)
    if args.planner:
        base = replace(base, planner=args.planner)
    seeds = parse_seeds(args.seeds) if args.seeds else [base.seed]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_metrics = []
    completed = True
    for seed in seeds:
        cfg = replace(base, seed=int(seed))
        hook = _grid_dump_hook(out_dir, {}) if args.dump_grids else None
        log = run_scenario(cfg, grid_hook=hook)
        metrics = compute_metrics(log)
        all_metrics.append(metrics)
        completed &= log.completed
        write_run_csv(log, out_dir / f"run_seed{seed}.csv")
        _write_json(metrics, out_dir / f"metrics_seed{seed}.json")
        print(f"seed {seed}: steps={log.n_steps} completed={log.completed} "
              f"min_u2o={metrics['min_u2o_m']:.2f} min_u2u={metrics['min_u2u_m']:.2f} "
              f"energy={metrics['total_energy_j']:.1f} collision={metrics['collision']}")
    summary = summarize_metrics(all_metrics)
    summary["completed_all"] = completed
    summary["config"] = _config_echo(base)
    summary["per_seed"] = all_metrics
    _write_json(summary, out_dir / "summary.json")
    ok = completed and summary["collisions"] == 0
    print(f"{len(seeds)} run(s), collisions={summary['collisions']}, "
          f"completed_all={completed}")
    return 0 if ok else 1


def cmd_compare(args) -> int:
    base = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else [base.seed]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = compare_planners(base, seeds)
    result["config"] = _config_echo(base)
    _write_json(result, out_dir / "compare.json")
    rows = [("planner", "mean energy J", "min U2O m", "min U2U m", "collisions")]
    for arm in ("main", "baseline"):
        s = result[arm]["summary"]
        rows.append((arm, f"{s['mean_total_energy_j']:.1f}", f"{s['min_u2o_m']:.2f}",
                     f"{s['min_u2u_m']:.2f}", str(s["collisions"])))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    for r in rows:
        print("  ".join(val.ljust(widths[c]) for c, val in enumerate(r)))
    print(f"energy ratio main/baseline: "
          f"{result['energy_ratio_main_over_baseline']:.3f}")
    incomplete = (result["main"]["incomplete_runs"]
                  + result["baseline"]["incomplete_runs"])
    return 0 if incomplete == 0 else 1


def cmd_ablate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = ablation_study(trials=args.trials)
    _write_json(result, out_dir / "ablate.json")
    print(f"trials per arm: {result['trials']}")
    print(f"oracle cost: {result['oracle_cost']:.4f}")
    for mode in ("uniform", "prediction"):
        print(f"{mode:>10} init: trap rate {result[f'trap_rate_{mode}']:.3f}, "
              f"mean gap {result[f'mean_gap_{mode}']:.4f}")
    return 0


def cmd_dump_field(args) -> int:
    from .field import EnvironmentField, SwarmFieldSpec, build_gradient_grid, conceptual_center
    from .sim import build_world

    base = load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = build_world(base)
    positions = np.array([u.position for u in world.uavs])
    goals = np.array([u.goal for u in world.uavs])
    center, _ = conceptual_center(positions, goals.mean(axis=0), base.step_len)
    env = EnvironmentField(
        swarm=SwarmFieldSpec(center=center, speed=base.swarm_speed,
                             influence=base.swarm_influence),
        obstacles=[o.model(base.obstacle_influence) for o in world.obstacles],
        d_safe=base.d_safe,
        altitude_exclusion=base.alt_exclusion,
    )
    uav = world.uavs[0]
    horizon = base.predict_steps * base.step_len
    margin = horizon + base.d_safe + 5.0 * base.grid_cell
    bounds = (positions[:, 0].min() - margin, positions[:, 0].max() + margin,
              positions[:, 1].min() - margin, positions[:, 1].max() + margin)
    grid = build_gradient_grid(env, uav.position, bounds, cell_size=base.grid_cell,
                               smooth_sigma=base.smooth_sigma, horizon=horizon,
                               plane_alt=uav.altitude)
    for layer in ("intensity", "binary", "external"):
        path = out_dir / f"field_{layer}.csv"
        export_grid_csv(grid, layer, path)
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="swarmplan",
        description="Cooperative UAV collision avoidance simulations")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--out", default="out", help="output directory")

    p_run = sub.add_parser("run", help="simulate encounters and write logs")
    common(p_run)
    p_run.add_argument("--seeds", default=None,
                       help="seed count, or comma-separated seed list")
    p_run.add_argument("--planner", choices=("main", "baseline"), default=None)
    p_run.add_argument("--dump-grids", action="store_true",
                       help="export grid layers at the first planning step")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="main vs baseline energy comparison")
    common(p_cmp)
    p_cmp.add_argument("--seeds", default=None,
                       help="seed count, or comma-separated seed list")
    p_cmp.set_defaults(func=cmd_compare)

    p_abl = sub.add_parser("ablate", help="prediction vs uniform PSO init study")
    common(p_abl)
    p_abl.add_argument("--trials", type=int, default=500,
                       help="searches per arm")
    p_abl.set_defaults(func=cmd_ablate)

    p_dump = sub.add_parser("dump-field", help="export field grid layers as CSV")
    common(p_dump)
    p_dump.set_defaults(func=cmd_dump_field)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
