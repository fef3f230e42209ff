"""Negative-control vaccine effectiveness estimation for test-negative samples.

The package estimates the causal risk ratio of infection under vaccination
from test-negative design data, correcting for unmeasured confounding with a
pair of negative controls: an exposure Z that shares the confounder but
cannot affect infection, and an outcome W that shares the confounder but is
unaffected by vaccination. A treatment confounding bridge function is fitted
from the test-negative controls, then used to reweight cases.
"""

from .bridge import (
    BridgeFit,
    BridgeSpec,
    CategoricalBridgeTable,
    ContinuousBridgeParams,
    MomentSpec,
    bridge_from_json,
    bridge_to_json,
    default_moment_spec,
    eval_bridge,
    fit_bridge_moment,
    moment_residuals,
    oracle_bridge_binary,
    oracle_bridge_continuous,
    solve_bridge_categorical,
)
from .data_model import (
    EstimateReport,
    Finding,
    TndRecord,
    TndSample,
    VariableRoles,
    load_csv,
    validate,
    write_csv,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateDataError,
    IdentifiabilityError,
    NcveError,
    SchemaError,
)
from .estimators import (
    BetaModelSpec,
    CFunctionSpec,
    conditional_ve_at,
    estimate_ve_conditional,
    estimate_ve_logistic,
    estimate_ve_nc,
    estimate_ve_oracle,
    wald_ci,
)
from .simulation import (
    BinaryDgpParams,
    ContinuousDgpParams,
    McRow,
    McSummary,
    ScenarioConfig,
    binary_counterfactual_prevalence,
    binary_infection_prevalence,
    binary_selection_rate,
    continuous_counterfactual_prevalence,
    continuous_infection_prevalence,
    continuous_selection_rate,
    default_params,
    generate_binary_sample,
    generate_continuous_sample,
    run_monte_carlo,
)

__version__ = "0.1.0"

__all__ = [
    "BetaModelSpec",
    "BinaryDgpParams",
    "BridgeFit",
    "BridgeSpec",
    "CFunctionSpec",
    "CategoricalBridgeTable",
    "ConfigError",
    "ContinuousBridgeParams",
    "ContinuousDgpParams",
    "ConvergenceError",
    "DegenerateDataError",
    "EstimateReport",
    "Finding",
    "IdentifiabilityError",
    "McRow",
    "McSummary",
    "MomentSpec",
    "NcveError",
    "ScenarioConfig",
    "SchemaError",
    "TndRecord",
    "TndSample",
    "VariableRoles",
    "binary_counterfactual_prevalence",
    "binary_infection_prevalence",
    "binary_selection_rate",
    "bridge_from_json",
    "bridge_to_json",
    "conditional_ve_at",
    "continuous_counterfactual_prevalence",
    "continuous_infection_prevalence",
    "continuous_selection_rate",
    "default_moment_spec",
    "default_params",
    "estimate_ve_conditional",
    "estimate_ve_logistic",
    "estimate_ve_nc",
    "estimate_ve_oracle",
    "eval_bridge",
    "fit_bridge_moment",
    "generate_binary_sample",
    "generate_continuous_sample",
    "load_csv",
    "moment_residuals",
    "oracle_bridge_binary",
    "oracle_bridge_continuous",
    "run_monte_carlo",
    "solve_bridge_categorical",
    "validate",
    "wald_ci",
    "write_csv",
]
