"""Energy-aware cooperative collision avoidance for UAV swarms.

The pipeline models the shared environment as a repulsive potential field,
extracts a safe-passage contour around threats, predicts short-horizon
trajectories by relaxing an elastic curve onto that contour, and searches
arc maneuvers plus altitude offsets with particle swarms.
"""

from .field import (
    SwarmFieldSpec,
    ObstacleModel,
    EnvironmentField,
    GradientGrid,
    swarm_intensity,
    obstacle_intensity,
    environment_intensity,
    field_gradient,
    conceptual_center,
    build_gradient_grid,
    grid_from_intensity,
    grids_from_intensity_multi,
    sample_external,
    multi_grid_sampler,
    export_grid_csv,
)
from .cost import (
    Trajectory,
    CostWeights,
    EnergyCoefficients,
    bending_cost,
    edge_cost,
    level_cost,
    altitude_cost,
    trajectory_energy,
    OUT_OF_BOUNDS_PENALTY,
)
from .predict import (
    ElSystem,
    PredictionResult,
    ConflictSet,
    build_el_system,
    init_prediction,
    predict_trajectory,
    predict_batch,
    detect_conflicts,
)
from .plan import (
    ArcParams,
    PsoConfig,
    PsoResult,
    AltitudePlan,
    arc_points,
    fit_arc,
    pso_minimize,
    plan_level,
    plan_level_many,
    plan_altitude,
)
from .sim import (
    ScenarioConfig,
    RunLog,
    make_scenario,
    build_world,
    run_scenario,
    compute_metrics,
)

__version__ = "0.1.0"
