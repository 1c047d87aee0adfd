"""Optimal DC-pension accumulation: classical and forward investment rules.

The package simulates a salaried saver's fund-to-salary ratio under
configurable market and salary dynamics, implements the classical
fixed-horizon CRRA rule and the optimal rules of four forward preference
families (power/exponential on the ratio or on discounted wealth), and ships
reproducible reference experiments comparing them.
"""

from .model import (
    FAMILIES,
    EXP_RATIO,
    EXP_WEALTH,
    POWER_RATIO,
    POWER_WEALTH,
    MarketCoeffs,
    ModelParams,
    PreferenceSpec,
    Schedule,
    ValidationError,
    alpha_from_beta,
    coefficients_at,
    market_price_of_risk,
)
from .strategies import (
    BackwardCrraPolicy,
    BaselinePolicy,
    ConstantMixPolicy,
    ForwardExpPolicy,
    ForwardPowerPolicy,
    WealthExpPolicy,
    WealthPowerPolicy,
    annuity_factor,
    annuity_factor_switch,
    backward_policy,
    baseline_weights,
    optimal_policy,
)
from .preferences import (
    DOMAIN_VIOLATED,
    AdmissibilityError,
    FieldContext,
    analytic_drift,
    benchmark_drift,
    evaluate_utility,
    field_evaluation,
    preference_drift,
    spde_drift,
    spde_policy,
    utility_curve,
)
from .engine import (
    GridAlignmentError,
    NoiseBlock,
    ReplayError,
    SimulationBlowUpError,
    Snapshot,
    SystemResult,
    SystemSpec,
    TimeGrid,
    simulate_baseline_ratio,
    simulate_path,
    simulate_systems,
    stream_for_path,
    write_trajectory_csv,
)
from .config import ConfigError, PRESETS, Settings, parse_config
from .experiments import EXPERIMENTS, run_experiment

__version__ = "0.1.0"
