"""Bayes estimators under a loss and their sensitivity to perturbing the loss.

All functions take draws of a scalar quantity zeta, either as an array or as
a SampleChain plus the Functional that extracts zeta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BracketError, ConvexityError, InsufficientSamplesError, SingularityError
from .models import Functional
from .sampler import SampleChain, batch_means_se

Fn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class LossSpec:
    """Base loss L(zeta, theta) with theta-derivatives, plus a perturbation Delta.

    The perturbed loss is L + omega * Delta.  ``delta_grad`` may be omitted
    when only the Bayes estimator is needed.
    """

    name: str
    loss: Fn
    grad: Fn
    hess: Fn
    delta: Optional[Fn] = None
    delta_grad: Optional[Fn] = None


@dataclass(frozen=True)
class BayesEstimate:
    theta_hat: float
    expected_loss_grad_residual: float
    iterations: int = 0


def _draws(chain, functional: Optional[Functional] = None) -> np.ndarray:
    if isinstance(chain, SampleChain):
        if functional is None:
            if chain.draws.shape[1] != 1:
                raise TypeError("multi-column chain needs a functional selecting zeta")
            x = chain.draws[:, 0]
        else:
            x = chain.evaluate(functional)
    else:
        x = np.asarray(chain, dtype=float).ravel()
    if x.size < 1:
        raise InsufficientSamplesError("no draws")
    return x


def _huber_grad(r, width):
    return np.clip(r / width, -1.0, 1.0)


def _huber(r, width):
    a = np.abs(r)
    return np.where(a <= width, 0.5 * r * r / width, a - 0.5 * width)


def squared_loss() -> LossSpec:
    return LossSpec(
        "squared",
        loss=lambda z, t: 0.5 * (z - t) ** 2,
        grad=lambda z, t: -(z - t),
        hess=lambda z, t: np.ones_like(z),
    )


def absolute_loss(width: float) -> LossSpec:
    """|zeta - theta| smoothed by a Huber transition of half-width ``width``."""
    return LossSpec(
        "absolute",
        loss=lambda z, t: _huber(z - t, width),
        grad=lambda z, t: -_huber_grad(z - t, width),
        hess=lambda z, t: (np.abs(z - t) <= width) / width,
    )


def pinball_loss(tau: float, width: float) -> LossSpec:
    """Check loss for the tau-quantile: 1/2 |r| + (tau - 1/2) r, with |r| Huber-smoothed."""
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0, 1)")
    return LossSpec(
        f"pinball({tau})",
        loss=lambda z, t: 0.5 * _huber(z - t, width) + (tau - 0.5) * (z - t),
        grad=lambda z, t: -(0.5 * _huber_grad(z - t, width) + (tau - 0.5)),
        hess=lambda z, t: 0.5 * (np.abs(z - t) <= width) / width,
    )


def mean_to_median() -> LossSpec:
    """L = (zeta - theta)^2 / 2 and Delta = |zeta - theta| - L, with exact signs.

    At omega = 0 the estimator is the mean; at omega = 1 it is the median.
    """
    base = squared_loss()
    return LossSpec(
        "mean_to_median",
        loss=base.loss, grad=base.grad, hess=base.hess,
        delta=lambda z, t: np.abs(z - t) - 0.5 * (z - t) ** 2,
        delta_grad=lambda z, t: -np.sign(z - t) + (z - t),
    )


def smoothing_width(draws: np.ndarray, rel: float = 1e-6) -> float:
    sd = float(np.std(draws))
    return rel * sd if sd > 0 else rel


def bayes_estimator(chain, loss: LossSpec, functional: Optional[Functional] = None,
                    bracket: Optional[tuple] = None, tol: float = 1e-10,
                    max_iter: int = 500) -> BayesEstimate:
    """Minimise the sample-average loss by safeguarded Newton on its gradient.

    The expected gradient is monotone for convex losses, so a sign-change
    bracket is kept throughout; a Newton step leaving the bracket (or a zero
    curvature) is replaced by bisection.
    """
    x = _draws(chain, functional)
    lo, hi = bracket if bracket is not None else (float(x.min()), float(x.max()))

    def g(t):
        return float(np.mean(loss.grad(x, t)))

    def h(t):
        return float(np.mean(loss.hess(x, t)))

    g_lo, g_hi = g(lo), g(hi)
    if g_lo == 0.0:
        return BayesEstimate(lo, 0.0)
    if g_hi == 0.0:
        return BayesEstimate(hi, 0.0)
    if g_lo > 0 or g_hi < 0:
        raise BracketError(f"expected loss gradient has no root in [{lo}, {hi}]")

    scale = max(abs(lo), abs(hi), 1.0)
    t = float(np.mean(x)) if lo <= np.mean(x) <= hi else 0.5 * (lo + hi)
    gt = g(t)
    for it in range(1, max_iter + 1):
        if gt < 0:
            lo = t
        elif gt > 0:
            hi = t
        curv = h(t)
        if curv < 0:
            raise ConvexityError(f"negative average curvature {curv:.3g} at theta={t:.6g}")
        step_ok = False
        if curv > 0:
            t_new = t - gt / curv
            step_ok = lo < t_new < hi or (t_new == t)
        if not step_ok:
            t_new = 0.5 * (lo + hi)
        t = t_new
        gt = g(t)
        if abs(gt) <= tol or hi - lo <= 4 * np.finfo(float).eps * scale:
            return BayesEstimate(t, gt, it)
    raise BracketError(f"Bayes estimator did not converge in {max_iter} iterations "
                       f"(residual {gt:.3g})")


def loss_sensitivity(chain, loss: LossSpec, functional: Optional[Functional] = None,
                     theta_hat: Optional[float] = None, curvature_tol: float = 1e-12) -> float:
    """d theta_hat / d omega at omega = 0 for the loss path L + omega * Delta.

    Equal to -E[d2L/dtheta2]^{-1} E[dDelta/dtheta], both at theta_hat.
    """
    if loss.delta_grad is None:
        raise ValueError(f"loss {loss.name!r} has no perturbation")
    x = _draws(chain, functional)
    if theta_hat is None:
        theta_hat = bayes_estimator(x, loss).theta_hat
    curv = float(np.mean(loss.hess(x, theta_hat)))
    if abs(curv) < curvature_tol:
        raise SingularityError(f"expected curvature {curv:.3g} is numerically zero")
    return -float(np.mean(loss.delta_grad(x, theta_hat))) / curv


def mean_median_approx(chain, functional: Optional[Functional] = None,
                       with_se: bool = False):
    """Fraction of draws above the sample mean minus fraction below.

    Draws equal to the mean count in neither.  With ``with_se`` also returns
    the batch-means MC-SE of the sign series (which ignores the noise in the
    plug-in mean and is conservative for smooth posteriors).
    """
    x = _draws(chain, functional)
    signs = np.sign(x - np.mean(x))
    value = float(np.mean(signs))
    if with_se:
        return value, batch_means_se(signs)
    return value


def exact_median_minus_mean(chain, functional: Optional[Functional] = None) -> float:
    """The quantity mean_median_approx linearises, computed directly."""
    x = _draws(chain, functional)
    return float(np.median(x) - np.mean(x))
