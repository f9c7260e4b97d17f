"""Experiment orchestration: initial data, configuration, experiments and the CLI."""
from rflab.harness.generators import (
    Mode,
    gen_conformal,
    gen_perturbation,
    gen_warped_product,
    random_direction,
    warped_factor,
)
from rflab.harness.config import ExperimentConfig, config_from_dict, default_config_dict, load_config
from rflab.harness.experiments import (
    BallReport,
    DependenceReport,
    StabilityReport,
    run_ball_conditions,
    run_dependence,
    run_stability,
)

__all__ = [
    "Mode",
    "gen_conformal",
    "gen_perturbation",
    "gen_warped_product",
    "random_direction",
    "warped_factor",
    "ExperimentConfig",
    "config_from_dict",
    "default_config_dict",
    "load_config",
    "BallReport",
    "DependenceReport",
    "StabilityReport",
    "run_ball_conditions",
    "run_dependence",
    "run_stability",
]
