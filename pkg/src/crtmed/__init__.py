"""Doubly robust mediation effect estimation for cluster-randomized trials.

Estimates cluster- and individual-average total, natural direct/indirect, and
spillover/individual mediation effects from trials where treatment is
randomized at the cluster level, using plug-in and influence-function-based
estimators with parametric working models or cross-fitted flexible learners.
"""

from .data import (
    ClusterRecord,
    EffectScale,
    SummaryConfig,
    Trial,
    TrialDataError,
    build_features,
    load_trial,
    resample_clusters,
    split_folds,
    trial_to_frame,
)
from .estimators import (
    EFFECTS,
    ClusterScore,
    EffectTable,
    EstimateResult,
    EstimatorSpec,
    PointEstimates,
    assemble_effects,
    cluster_scores,
    estimate,
    estimate_eif,
    estimate_mf,
    scores_to_points,
    stabilize,
)
from .inference import (
    InferenceSpec,
    IntervalEstimate,
    bootstrap_effects,
    eif_variance,
    effect_intervals,
    estimate_with_intervals,
)
from .integrate import AuxEvaluator, IntegrationPlan, sample_mediators
from .nuisance import (
    Misspecification,
    NuisanceSet,
    copula_densities,
    fit_copula,
    fit_eta_dagger,
    fit_eta_star,
    fit_marginal_mediator,
    fit_nuisances,
    fit_outcome_model,
    fit_propensity,
)
from .sim import (
    FiniteDgp,
    LinearGaussianDgp,
    OracleTruth,
    ScenarioResult,
    exact_proportions_trial,
    generate_trial,
    oracle_effects,
    oracle_nuisances,
    oracle_truth,
    rps_like_dgp,
    run_scenario,
)

__version__ = "0.1.0"
