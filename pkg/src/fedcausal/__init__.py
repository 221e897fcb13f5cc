"""Federated estimation of average treatment effects from multi-site
observational data.

Local propensity models stay at their sites; only aggregate payloads
(model parameters, moments, losses) cross the boundary. The global
propensity score is a weighted combination of local scores under either
membership weights (federated multinomial logistic regression) or density
ratio weights (one-shot Gaussian moment exchange), feeding IPW and
augmented IPW estimators of the average treatment effect.
"""

from .data import (
    FederatedDataset,
    Record,
    RngHandle,
    SiteDataset,
    load_csv,
    save_csv,
    site_proportions,
    validate_federation,
)
from .dgp import (
    DgpAParams,
    DgpBParams,
    OutcomeSpec,
    benchmark_outcome_spec,
    dgp_a_params,
    dgp_b_params,
    gen_dgp_a,
    gen_dgp_b,
    logistic,
    oracle_global_propensity_fn,
    oracle_local_propensities,
    oracle_membership_weights_fn,
    true_ate,
)
from .errors import (
    AllDensitiesZero,
    ConfigError,
    DimensionMismatch,
    DivergenceDetected,
    DivisionByZeroPropensity,
    EmptyGlobalArm,
    EmptySite,
    FedCausalError,
    InsufficientData,
    InvalidTreatment,
    MetaUndefined,
    NonPositiveDefiniteCovariance,
    PlotDataError,
    SingularCovariance,
    TooManyFailedResamples,
    ValidationError,
)
from .estimators import (
    BootstrapInterval,
    EstimateReport,
    NuisanceBundle,
    aipw_terms,
    bootstrap_ci,
    estimate_centralized,
    estimate_federated,
    estimate_meta,
    federated_tau,
    ipw_terms,
    overlap_global,
    overlap_local,
    variance_aipw_plugin,
    variance_ipw_plugin,
    variance_meta_decomposition,
)
from .federation import (
    CommunicationLedger,
    FedAvgConfig,
    communication_cost,
    fedavg_multinomial,
    fedavg_outcome_models,
    federated_standardize,
    one_shot_moment_exchange,
)
from .nuisance import (
    GaussianMoments,
    GlobalPropensity,
    LogisticParams,
    MembershipParams,
    OutcomeParams,
    density_ratio_weights,
    fit_gaussian_moments,
    fit_logistic_local,
    gaussian_density,
    global_propensity,
    membership_weights,
    nuisance_from_json,
    nuisance_to_json,
    predict_local,
)
from .experiments import (
    ESTIMATOR_NAMES,
    RunSummary,
    ScenarioConfig,
    builtin_panel_configs,
    emit_plotdata,
    load_scenario_config,
    run_matrix,
    run_scenario,
)

__version__ = "0.1.0"
