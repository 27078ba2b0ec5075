"""Local robustness of Bayesian posterior expectations computed from MCMC draws."""

__version__ = "0.1.0"

from .errors import SensitivityError  # noqa: E402
from .models import (  # noqa: E402
    CaseWeights,
    Dataset,
    DependentStickPrior,
    Functional,
    MixtureState,
    NormalNormalModel,
    TruncatedDPMixtureModel,
)
from .sampler import SampleChain, SamplerConfig, sample_posterior  # noqa: E402
from .sensitivity import (  # noqa: E402
    InfluenceVector,
    SensitivityEstimate,
    case_influence,
    esb_rho_sensitivity,
    hyper_sensitivity,
    posterior_cov,
)

__all__ = [
    "CaseWeights", "Dataset", "DependentStickPrior", "Functional", "InfluenceVector",
    "MixtureState", "NormalNormalModel", "SampleChain", "SamplerConfig", "SensitivityError",
    "SensitivityEstimate", "TruncatedDPMixtureModel", "case_influence", "esb_rho_sensitivity",
    "hyper_sensitivity", "posterior_cov", "sample_posterior",
]
