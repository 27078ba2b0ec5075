"""Empirical Bayes for the DP concentration and the sensitivity of EB-fitted posteriors.

The EB fit solves G(alpha, m(alpha, omega)) = 0 where m is the posterior
mean number of occupied clusters and

    G(alpha, m) = sum_{n=1}^{N} alpha / (alpha + n - 1) - m.

The sensitivity of a posterior expectation to omega then picks up an extra
term through d alpha_hat / d omega, obtained from the implicit function
theorem applied to G.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import (
    BracketError,
    DomainError,
    NoisyObjectiveError,
    NonIdentifiedError,
    SingularityError,
)
from .models import Dataset, Functional, TruncatedDPMixtureModel, as_weights, occupied_clusters
from .sampler import SampleChain, SamplerConfig, expectation, gibbs_dp_mixture
from .sensitivity import SensitivityEstimate, hyper_score, posterior_cov

logger = logging.getLogger(__name__)

CLUSTER_COUNT = Functional("n_clusters", occupied_clusters)


def cluster_count_G(alpha: float, m: float, N: int) -> float:
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if N < 1:
        raise DomainError("N must be at least 1")
    n = np.arange(N, dtype=float)
    return float(np.sum(alpha / (alpha + n)) - m)


def dG_dalpha(alpha: float, N: int) -> float:
    """sum_{n=1}^{N} (n - 1) / (alpha + n - 1)^2."""
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    n = np.arange(N, dtype=float)
    return float(np.sum(n / (alpha + n) ** 2))


def dG_dm() -> float:
    return -1.0


@dataclass(frozen=True)
class EBSolverConfig:
    bracket: tuple = (1e-3, 1e3)
    tol: float = 0.05
    rel_width: float = 1e-3
    max_iter: int = 100
    common_random_numbers: bool = True

    def __post_init__(self):
        lo, hi = self.bracket
        if not 0 < lo < hi:
            raise BracketError(f"empirical_bayes.bracket must satisfy 0 < lo < hi, got {self.bracket}")


@dataclass(frozen=True)
class EBSolution:
    alpha_hat: float
    residual: float
    iterations: int
    bracket: tuple
    m_hat: float
    m_se: float
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bracket"] = list(self.bracket)
        d["trace"] = [list(t) for t in self.trace]
        return d


def mean_clusters(model: TruncatedDPMixtureModel, data: Dataset, w, config: SamplerConfig) -> tuple:
    """m(alpha, omega): posterior mean occupied-cluster count and its MC-SE."""
    chain = gibbs_dp_mixture(model, data, w, config)
    return expectation(chain, CLUSTER_COUNT)


def solve_eb(model: TruncatedDPMixtureModel, data: Dataset, w, sampler_config: SamplerConfig,
             solver_config: Optional[EBSolverConfig] = None) -> EBSolution:
    """Find alpha_hat with |G(alpha_hat, m(alpha_hat))| <= tol by bisection in log(alpha).

    Each candidate alpha gets a fresh chain.  With common random numbers on,
    every candidate reuses ``sampler_config.seed``.
    """
    cfg = solver_config or EBSolverConfig()
    if model.stick_prior is not None:
        raise DomainError("EB for alpha needs the independent Beta(1, alpha) stick prior")
    w = as_weights(w, data)
    if data.N == 1:
        raise NonIdentifiedError("with one observation m = 1 and G = 0 for every alpha; "
                                 "alpha is not identified")
    trace = []

    def objective(alpha):
        seed = sampler_config.seed if cfg.common_random_numbers else sampler_config.seed + len(trace)
        m, se = mean_clusters(model.with_hyper("alpha", alpha), data, w,
                              sampler_config.replace(seed=seed))
        g = cluster_count_G(alpha, m, data.N)
        trace.append((alpha, m, g))
        logger.debug("EB candidate alpha=%.6g m=%.6g G=%.6g", alpha, m, g)
        return g, m, se

    lo, hi = map(float, cfg.bracket)
    g_lo, m_lo, se_lo = objective(lo)
    g_hi, m_hi, se_hi = objective(hi)

    if g_lo > 0 and g_hi > 0 or g_lo < 0 and g_hi < 0:
        # no sign change: accept an endpoint that already satisfies the tolerance
        if abs(g_lo) <= cfg.tol and abs(g_lo) <= abs(g_hi):
            return EBSolution(lo, abs(g_lo), len(trace), (lo, hi), m_lo, se_lo, trace)
        if abs(g_hi) <= cfg.tol:
            return EBSolution(hi, abs(g_hi), len(trace), (lo, hi), m_hi, se_hi, trace)
        raise BracketError(
            f"empirical_bayes.bracket: G has no sign change on [{lo:g}, {hi:g}] "
            f"(G(lo)={g_lo:.4g}, G(hi)={g_hi:.4g})")

    left = (lo, g_lo, m_lo, se_lo)
    right = (hi, g_hi, m_hi, se_hi)
    it = 0
    while right[0] / left[0] - 1.0 > cfg.rel_width and it < cfg.max_iter:
        it += 1
        mid = math.sqrt(left[0] * right[0])
        g_mid, m_mid, se_mid = objective(mid)
        if g_mid == 0.0:
            left = right = (mid, g_mid, m_mid, se_mid)
            break
        if (g_mid < 0) == (left[1] < 0):
            left = (mid, g_mid, m_mid, se_mid)
        else:
            right = (mid, g_mid, m_mid, se_mid)

    alpha_hat, g_hat, m_hat, se_hat = left if abs(left[1]) <= abs(right[1]) else right
    lo, hi = left[0], right[0]
    if abs(g_hat) > cfg.tol:
        raise NoisyObjectiveError(
            f"EB residual |G|={abs(g_hat):.4g} at alpha={alpha_hat:.4g} exceeds tol={cfg.tol}; "
            "Monte Carlo noise in m is too large, increase n_draws")
    return EBSolution(alpha_hat, abs(g_hat), len(trace), (lo, hi), m_hat, se_hat, trace)


@dataclass(frozen=True)
class EBDerivativeBreakdown:
    total: float
    total_se: float
    direct_term: float
    indirect_term: float
    dalpha_domega: float
    dG_dalpha_total: float
    dG_dalpha: float
    dG_dm: float
    dm_dalpha: SensitivityEstimate
    dm_domega: SensitivityEstimate
    alpha_hat: float
    m0: float

    def to_dict(self) -> dict:
        return asdict(self)


def eb_sensitivity(chain: SampleChain, phi: Functional, F: Functional,
                   model: TruncatedDPMixtureModel, data: Dataset, w, omega: str,
                   singular_tol: float = 1e-8) -> EBDerivativeBreakdown:
    """d E[phi] / d omega through both the posterior and the EB-fitted alpha.

    ``chain`` must be sampled at (alpha_hat, omega_0) with ``model.alpha``
    equal to alpha_hat.  ``omega`` is ``"w[n]"`` for a case weight or the
    name of another model hyperparameter.
    """
    w = as_weights(w, data)
    if omega == "alpha":
        raise DomainError("omega must differ from the EB-fitted alpha")
    s_alpha = model.dlogjoint_dalpha(chain.blocks)
    s_omega = hyper_score(chain, model, data, omega, w)
    Fv = chain.evaluate(F)
    m0 = float(np.mean(Fv))

    dm_dalpha = posterior_cov(chain, Fv, s_alpha)
    dm_domega = posterior_cov(chain, Fv, s_omega)
    g_alpha = dG_dalpha(model.alpha, data.N)
    g_m = dG_dm()
    g_alpha_total = g_alpha + g_m * dm_dalpha.value
    if abs(g_alpha_total) < singular_tol:
        raise SingularityError(
            f"implicit-function term is near-singular: dG/dalpha total = {g_alpha_total:.3g}")
    dalpha_domega = -(g_m * dm_domega.value) / g_alpha_total

    direct = posterior_cov(chain, phi, s_omega)
    indirect = posterior_cov(chain, phi, s_alpha).value * dalpha_domega
    total = posterior_cov(chain, phi, s_omega + s_alpha * dalpha_domega)
    return EBDerivativeBreakdown(
        total=total.value, total_se=total.mc_se,
        direct_term=direct.value, indirect_term=indirect,
        dalpha_domega=dalpha_domega, dG_dalpha_total=g_alpha_total,
        dG_dalpha=g_alpha, dG_dm=g_m,
        dm_dalpha=dm_dalpha, dm_domega=dm_domega,
        alpha_hat=model.alpha, m0=m0)


def eb_posterior_expectation(model: TruncatedDPMixtureModel, data: Dataset, w, phi: Functional,
                             sampler_config: SamplerConfig, solver_config: Optional[EBSolverConfig] = None,
                             final_config: Optional[SamplerConfig] = None) -> tuple:
    """Run the whole EB pipeline: fit alpha, then E[phi] under a fresh chain at alpha_hat.

    Returns (expectation, mc_se, EBSolution).
    """
    sol = solve_eb(model, data, w, sampler_config, solver_config)
    fitted = model.with_hyper("alpha", sol.alpha_hat)
    chain = gibbs_dp_mixture(fitted, data, w, final_config or sampler_config)
    mean, se = expectation(chain, phi)
    return mean, se, sol
