"""Covariance-form sensitivity estimators.

Every derivative here is a posterior covariance between the quantity of
interest and a derivative of the log joint, estimated from draws.  MC
standard errors come from batch means on the product-deviation series, so
they remain valid for autocorrelated chains.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .errors import InsufficientSamplesError, NumericError, SingularityError
from .models import Dataset, DependentStickPrior, Functional, Model
from .sampler import SampleChain, batch_means_se, batch_means_se_columns, ess

Series = Union[Functional, np.ndarray]


@dataclass(frozen=True)
class SensitivityEstimate:
    value: float
    mc_se: float
    ess_used: float
    n_draws: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise NumericError("sensitivity estimate is not finite")
        if not self.mc_se >= 0:
            raise NumericError("MC standard error must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InfluenceVector:
    """Per-point derivative of E[phi] with respect to each case weight at w = 1."""

    per_point: np.ndarray
    mc_se: np.ndarray
    n_draws: int

    def __len__(self):
        return int(self.per_point.size)

    def __getitem__(self, n) -> float:
        return float(self.per_point[n])

    def estimate(self, n: int) -> SensitivityEstimate:
        return SensitivityEstimate(float(self.per_point[n]), float(self.mc_se[n]),
                                   float(self.n_draws), self.n_draws)

    def to_dict(self) -> dict:
        return {"per_point": [float(v) for v in self.per_point],
                "mc_se": [float(v) for v in self.mc_se],
                "n_draws": self.n_draws}


def _series(chain: SampleChain, f: Series) -> np.ndarray:
    if isinstance(f, Functional):
        return chain.evaluate(f)
    out = np.asarray(f, dtype=float)
    if out.shape != (chain.S,):
        raise ValueError(f"series has shape {out.shape}, expected ({chain.S},)")
    return out


def _centered(x: np.ndarray) -> np.ndarray:
    # shifting by the first draw first makes a constant series exactly zero
    x = x - x[0]
    return x - x.mean(axis=0)


def posterior_cov(chain: SampleChain, f: Series, g: Series) -> SensitivityEstimate:
    """Sample covariance of f and g over the draws (S - 1 denominator)."""
    S = chain.S
    if S < 2:
        raise InsufficientSamplesError("posterior_cov needs at least two draws")
    fs, gs = _series(chain, f), _series(chain, g)
    prod = _centered(fs) * _centered(gs)
    value = float(prod.sum() / (S - 1))
    se = batch_means_se(prod) * S / (S - 1)
    if S >= 10 and np.ptp(prod) > 0:
        ess_used = ess(prod)
    else:
        ess_used = float(S)
    return SensitivityEstimate(value, float(se), ess_used, S)


def hyper_sensitivity(chain: SampleChain, phi: Series, dlogjoint: Series) -> SensitivityEstimate:
    """Estimated dE[phi]/d omega at the chain's hyperparameter.

    ``dlogjoint`` is the per-draw derivative of the log joint with respect to
    omega; the normalising constant does not depend on the state, so the
    joint suffices.
    """
    return posterior_cov(chain, phi, dlogjoint)


def case_influence(chain: SampleChain, phi: Series, data: Dataset, model: Model) -> InfluenceVector:
    """Cov(phi, log P(x_n | state)) for every n, from a chain sampled at w = 1."""
    S = chain.S
    if S < 2:
        raise InsufficientSamplesError("case_influence needs at least two draws")
    fs = _centered(_series(chain, phi))
    ll = chain.loglik_terms(model, data)
    if not np.all(np.isfinite(ll)):
        s, n = np.argwhere(~np.isfinite(ll))[0]
        raise NumericError(f"non-finite log likelihood for point {n} in draw {s}", index=int(n))
    prod = fs[:, None] * _centered(ll)
    per_point = prod.sum(axis=0) / (S - 1)
    se = batch_means_se_columns(prod) * S / (S - 1)
    return InfluenceVector(per_point, se, S)


def esb_rho_sensitivity(chain: SampleChain, phi: Series, prior: DependentStickPrior) -> SensitivityEstimate:
    """Cov(phi, d/d rho log P(v_1..v_{K-1} | rho)) over the draws.

    ``prior`` may be any object exposing ``dlogpdf_drho`` over a batch of
    free sticks.  The last stick is fixed by truncation and carries no density.
    """
    sticks = chain.block("sticks")[:, :-1]
    bad = (sticks <= 0.0) | (sticks >= 1.0)
    if np.any(bad):
        s = int(np.argwhere(bad)[0][0])
        raise SingularityError(f"boundary stick in draw {s}", index=s)
    score = prior.dlogpdf_drho(sticks)
    return posterior_cov(chain, phi, score)


def linear_extrapolate(base_expectation: float, estimate: Union[SensitivityEstimate, float],
                       delta_omega: float) -> float:
    slope = estimate.value if isinstance(estimate, SensitivityEstimate) else float(estimate)
    return float(base_expectation + slope * delta_omega)


def weight_score(chain: SampleChain, model: Model, data: Dataset, n: int) -> np.ndarray:
    """d/dw_n of the weighted log joint, per draw."""
    return chain.loglik_terms(model, data)[:, n]


def hyper_score(chain: SampleChain, model: Model, data: Dataset, name: str,
                w: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-draw derivative of the log joint in a named hyperparameter.

    ``w[n]`` names a case weight; anything else is passed to the model.
    """
    if name.startswith("w[") and name.endswith("]"):
        return weight_score(chain, model, data, int(name[2:-1]))
    return model.hyper_score(name, chain.blocks, data, w)
