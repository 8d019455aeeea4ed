"""Dose-response curve fitting and functional similarity metrics for two-arm trials."""

__version__ = "0.1.0"

from .fit import (  # noqa: E402
    EXP_DECAY,
    LOG_LOGISTIC,
    DegreeSelection,
    MLEOptions,
    NonparametricFit,
    ParametricFit,
    TrialSeries,
    fit_bernstein_wls,
    fit_parametric_mle,
    loglik,
    select_degree_ks,
)
from .inference import BootstrapResult, nonparametric_bootstrap, parametric_bootstrap  # noqa: E402
from .metric import MetricResult, MetricSpec, lp_metric, noninferiority_decision  # noqa: E402
from .models import (  # noqa: E402
    RELAXED,
    STRICT,
    ORIGIN_AUGMENTED,
    BernsteinCurve,
    ExpDecayParams,
    LogLogisticParams,
)
from .random_effects import (  # noqa: E402
    RandomCoefParams,
    fit_random_coef_mle,
    marginal_theta_expectation,
)
from .simlab import StudyConfig, run_mc_study, simulate_trial  # noqa: E402

__all__ = [
    "EXP_DECAY", "LOG_LOGISTIC", "STRICT", "RELAXED", "ORIGIN_AUGMENTED",
    "TrialSeries", "MLEOptions", "ParametricFit", "NonparametricFit", "DegreeSelection",
    "ExpDecayParams", "LogLogisticParams", "BernsteinCurve",
    "fit_parametric_mle", "fit_bernstein_wls", "select_degree_ks", "loglik",
    "MetricSpec", "MetricResult", "lp_metric", "noninferiority_decision",
    "BootstrapResult", "parametric_bootstrap", "nonparametric_bootstrap",
    "StudyConfig", "run_mc_study", "simulate_trial",
    "RandomCoefParams", "marginal_theta_expectation", "fit_random_coef_mle",
]
