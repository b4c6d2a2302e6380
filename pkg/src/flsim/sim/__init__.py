from .config import ConfigError, ExperimentConfig, FailureInjection, config_from_dict, load_config
from .data import FederatedData, InvalidSpec, SyntheticDataSpec, generate_data
from ..engine import Engine, stable_hash
from .experiment import (
    ExperimentResult,
    Simulation,
    build_simulation,
    inject_failure,
    run_experiment,
    run_simulation,
    simulate_mass_rejection,
)
from .fleet import Fleet, FleetSpec, SimDevice, generate_fleet
from .network import Network, WireMismatch

__all__ = [
    "ConfigError",
    "Engine",
    "ExperimentConfig",
    "ExperimentResult",
    "FailureInjection",
    "FederatedData",
    "Fleet",
    "FleetSpec",
    "InvalidSpec",
    "Network",
    "SimDevice",
    "Simulation",
    "SyntheticDataSpec",
    "WireMismatch",
    "build_simulation",
    "config_from_dict",
    "generate_data",
    "generate_fleet",
    "inject_failure",
    "load_config",
    "run_experiment",
    "run_simulation",
    "simulate_mass_rejection",
    "stable_hash",
]
