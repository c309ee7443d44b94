"""Communication-free distributed EV charging control and fleet simulation."""

__version__ = "0.1.0"

from .baseline import CapacityMargin, LoadProfile, capacity_margin, estimate_group_baseline, high_x_of_y
from .behavior import ChargingRecord, GmmModel, em_fit, fit_gmm, sample_lhs, select_component_counts
from .dispatch import (
    ChargeCommand,
    ChargeProbability,
    DemandRequest,
    StartProbability,
    build_gamma,
    charging_probability,
    make_command,
    sample_start_time,
    solve_start_distribution,
)
from .errors import EvChargeError
from .fleet import (
    ScenarioConfig,
    generate_scenario,
    max_acceptable_capacity,
    metrics,
    overload_ratio,
    simulate_centralized,
    simulate_disordered,
    simulate_distributed,
)
from .qp import QpProblem, QpSolution, build_qp, solve_pdipm, verify_psd

__all__ = [
    "CapacityMargin",
    "ChargeCommand",
    "ChargeProbability",
    "ChargingRecord",
    "DemandRequest",
    "EvChargeError",
    "GmmModel",
    "LoadProfile",
    "QpProblem",
    "QpSolution",
    "ScenarioConfig",
    "StartProbability",
    "build_gamma",
    "build_qp",
    "capacity_margin",
    "charging_probability",
    "em_fit",
    "estimate_group_baseline",
    "fit_gmm",
    "generate_scenario",
    "high_x_of_y",
    "make_command",
    "max_acceptable_capacity",
    "metrics",
    "overload_ratio",
    "sample_lhs",
    "sample_start_time",
    "select_component_counts",
    "simulate_centralized",
    "simulate_disordered",
    "simulate_distributed",
    "solve_pdipm",
    "solve_start_distribution",
    "verify_psd",
]
