"""Shipped Bayesian models: state layout, weighted log joint, hyperparameter scores.

States are handled as dictionaries of named blocks (``"mu"``, ``"sticks"``,
``"comp_means"``, ``"assignments"``).  Every model method that does real work
is vectorised over a leading draw axis so that a whole chain can be scored
at once; the single-state functions below wrap those with a batch of one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Union

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DimensionError, DomainError, NumericError, SingularityError

LOG_2PI = math.log(2.0 * math.pi)
# Largest double below 1; interior sticks are clipped here so log(1 - v) stays finite.
STICK_MAX = float(np.nextafter(1.0, 0.0))
STICK_MIN = float(np.finfo(float).tiny)


def _normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


# ---------------------------------------------------------------------------
# Data and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_1d(np.asarray(self.points, dtype=float))
        if pts.ndim != 1:
            raise DimensionError("observations must be scalars (one column)")
        if pts.size < 1:
            raise DomainError("dataset must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise NumericError("dataset contains non-finite values",
                               index=int(np.flatnonzero(~np.isfinite(pts))[0]))
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return int(self.points.size)

    def __len__(self):
        return self.N

    def without(self, n: int) -> "Dataset":
        """Dataset with point ``n`` physically removed."""
        if not 0 <= n < self.N:
            raise IndexError(f"point index {n} out of range for N={self.N}")
        return Dataset(np.delete(self.points, n))

    @classmethod
    def from_csv(cls, path, header: Optional[bool] = None) -> "Dataset":
        """Read a single-column CSV.

        ``header=None`` sniffs: a first row that does not parse as a float is
        treated as a header.
        """
        rows = []
        with open(Path(path), newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or not row[0].strip():
                    continue
                rows.append(row[0].strip())
        if header is None:
            try:
                float(rows[0])
                header = False
            except (ValueError, IndexError):
                header = True
        if header:
            rows = rows[1:]
        return cls(np.array([float(r) for r in rows]))


@dataclass(frozen=True)
class CaseWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float)).copy()
        if w.ndim != 1:
            raise DimensionError("case weights must be a vector")
        if not np.all(np.isfinite(w)):
            raise NumericError("case weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def ones(cls, n: int) -> "CaseWeights":
        return cls(np.ones(n))

    def with_weight(self, n: int, value: float) -> "CaseWeights":
        w = self.w.copy()
        w[n] = value
        return CaseWeights(w)

    def __len__(self):
        return int(self.w.size)

    def check(self, data: Dataset) -> np.ndarray:
        if self.w.size != data.N:
            raise DimensionError(
                f"case weights have length {self.w.size}, data has N={data.N}")
        return self.w


def as_weights(w, data: Dataset) -> np.ndarray:
    if w is None:
        return np.ones(data.N)
    if not isinstance(w, CaseWeights):
        w = CaseWeights(w)
    return w.check(data)


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Functional:
    """A named scalar quantity of interest.

    ``fn`` receives a dict of batched state blocks (leading axis = draws) and
    returns one value per draw.
    """

    name: str
    fn: Callable[[Mapping[str, np.ndarray]], np.ndarray]

    def batch(self, blocks: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.asarray(self.fn(blocks), dtype=float)
        return np.broadcast_to(out, (_batch_size(blocks),)).astype(float)

    def __call__(self, state) -> float:
        return float(self.batch(_batched(state))[0])


def _batch_size(blocks):
    return next(iter(blocks.values())).shape[0]


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureState:
    sticks: np.ndarray
    comp_means: np.ndarray
    assignments: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.sticks, dtype=float)
        mu = np.asarray(self.comp_means, dtype=float)
        z = np.asarray(self.assignments)
        if v.ndim != 1 or mu.shape != v.shape:
            raise DimensionError("sticks and comp_means must be K-vectors")
        if np.any(v <= 0.0) or np.any(v > 1.0):
            raise DomainError("every stick must lie in (0, 1]")
        if np.any(z < 0) or np.any(z >= v.size) or np.any(z != np.round(z)):
            raise DomainError("assignments must be integers in [0, K)")
        object.__setattr__(self, "sticks", v)
        object.__setattr__(self, "comp_means", mu)
        object.__setattr__(self, "assignments", z.astype(np.int64))

    def blocks(self) -> dict:
        return {"sticks": self.sticks, "comp_means": self.comp_means,
                "assignments": self.assignments}

    @property
    def weights(self) -> np.ndarray:
        return stick_breaking_weights(self.sticks)


def _batched(state) -> dict:
    """Turn one state (float mu, MixtureState or dict of blocks) into a batch of one."""
    if isinstance(state, MixtureState):
        state = state.blocks()
    elif np.isscalar(state):
        state = {"mu": np.array([float(state)])}
    return {k: np.asarray(v)[None, ...] for k, v in state.items()}


def stick_breaking_weights(sticks) -> np.ndarray:
    """pi_k = v_k * prod_{j<k} (1 - v_j), along the last axis."""
    v = np.asarray(sticks, dtype=float)
    remaining = np.cumprod(1.0 - v, axis=-1)
    left = np.ones_like(v)
    left[..., 1:] = remaining[..., :-1]
    return v * left


def _log_stick_weights(v):
    with np.errstate(divide="ignore"):
        log_rem = np.cumsum(np.log1p(-v), axis=-1)
        out = np.log(v)
    out[..., 1:] += log_rem[..., :-1]
    return out


# ---------------------------------------------------------------------------
# Stick priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BetaStickPrior:
    """Independent Beta(1, alpha) sticks (the truncated DP)."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")

    def logpdf(self, free_sticks: np.ndarray) -> np.ndarray:
        v = np.asarray(free_sticks, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = math.log(self.alpha) + (self.alpha - 1.0) * np.log1p(-v)
        return terms.sum(axis=-1)


@dataclass(frozen=True)
class DependentStickPrior:
    """Equicorrelated Gaussian on logit(v) with common correlation ``rho``.

    ``rho = 0`` gives independent logit-normal sticks; ``rho -> 1`` forces all
    sticks to a common value.  Negative ``rho`` is accepted down to the
    positive-definiteness limit ``-1/(d-1)`` for ``d`` sticks so that central
    differences around ``rho = 0`` are possible.
    """

    rho: float = 0.0
    base_mean: float = 0.0
    base_var: float = 3.0

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")
        if not self.base_var > 0:
            raise DomainError("base_var must be positive")

    def _check_dim(self, d):
        if d > 1 and self.rho <= -1.0 / (d - 1):
            raise DomainError(
                f"rho={self.rho} is not a valid correlation for {d} sticks "
                f"(needs rho > {-1.0 / (d - 1):.6g})")

    def _moments(self, eta):
        d = eta.shape[-1]
        y = eta - self.base_mean
        total_sq = (y ** 2).sum(axis=-1)
        sum_sq = y.sum(axis=-1) ** 2
        spread = total_sq - sum_sq / d
        return d, spread, sum_sq

    def logpdf_logit(self, eta) -> np.ndarray:
        """Log density of eta = logit(v) (no Jacobian)."""
        eta = np.asarray(eta, dtype=float)
        d, spread, sum_sq = self._moments(eta)
        self._check_dim(d)
        s, r = self.base_var, self.rho
        lam_perp = s * (1.0 - r)
        lam_one = s * (1.0 + (d - 1) * r)
        logdet = (d - 1) * math.log(lam_perp) + math.log(lam_one)
        quad = spread / lam_perp + sum_sq / (d * lam_one)
        return -0.5 * (d * LOG_2PI + logdet + quad)

    def logpdf(self, free_sticks) -> np.ndarray:
        v = _interior_sticks(free_sticks)
        eta = np.log(v) - np.log1p(-v)
        jac = -(np.log(v) + np.log1p(-v)).sum(axis=-1)
        return self.logpdf_logit(eta) + jac

    def dlogpdf_drho(self, free_sticks) -> np.ndarray:
        v = _interior_sticks(free_sticks)
        eta = np.log(v) - np.log1p(-v)
        d, spread, sum_sq = self._moments(eta)
        self._check_dim(d)
        if d < 2:
            return np.zeros(eta.shape[:-1])
        s, r = self.base_var, self.rho
        one = 1.0 + (d - 1) * r
        dlogdet = -(d - 1) / (1.0 - r) + (d - 1) / one
        dquad = (spread / (1.0 - r) ** 2 - sum_sq * (d - 1) / (d * one ** 2)) / s
        return -0.5 * (dlogdet + dquad)


def _interior_sticks(sticks) -> np.ndarray:
    v = np.asarray(sticks, dtype=float)
    bad = (v <= 0.0) | (v >= 1.0)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise SingularityError(
            f"stick on the boundary of (0, 1) at position {tuple(int(i) for i in idx)}",
            index=tuple(int(i) for i in idx))
    return v


def dlogstickprior_drho(prior: DependentStickPrior, sticks) -> float:
    """d/d rho of log P(v_1..v_d | rho) for a single vector of free sticks."""
    v = np.atleast_1d(np.asarray(sticks, dtype=float))
    return float(prior.dlogpdf_drho(v[None, :])[0])


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalNormalModel:
    """x_n ~ N(mu, sigma2), mu ~ N(mu0, tau2), sigma2 known."""

    sigma2: float = 1.0
    mu0: float = 0.0
    tau2: float = 1.0

    kind = "normal_normal"
    hyperparameters = ("mu0",)

    def __post_init__(self):
        if not self.sigma2 > 0 or not self.tau2 > 0:
            raise DomainError("sigma2 and tau2 must be positive")

    @property
    def tag(self) -> str:
        return f"normal_normal(sigma2={self.sigma2!r},mu0={self.mu0!r},tau2={self.tau2!r})"

    def layout(self, n_points: int) -> dict:
        return {"mu": (0, 1)}

    def log_prior_batch(self, blocks) -> np.ndarray:
        return _normal_logpdf(blocks["mu"][:, 0], self.mu0, self.tau2)

    def loglik_batch(self, blocks, data: Dataset) -> np.ndarray:
        mu = blocks["mu"][:, :1]
        return _normal_logpdf(data.points[None, :], mu, self.sigma2)

    def per_point_loglik(self, state, x: float, n: Optional[int] = None) -> float:
        mu = _batched(state)["mu"][0, 0]
        val = float(_normal_logpdf(x, mu, self.sigma2))
        if not math.isfinite(val):
            raise NumericError("non-finite log likelihood", index=n)
        return val

    def dlogjoint_dmu0(self, blocks) -> np.ndarray:
        return (blocks["mu"][:, 0] - self.mu0) / self.tau2

    def hyper_score(self, name: str, blocks, data, w) -> np.ndarray:
        if name == "mu0":
            return self.dlogjoint_dmu0(blocks)
        raise KeyError(f"normal_normal has no hyperparameter {name!r}")

    def with_hyper(self, name: str, value: float) -> "NormalNormalModel":
        if name != "mu0":
            raise KeyError(f"normal_normal has no hyperparameter {name!r}")
        return NormalNormalModel(self.sigma2, value, self.tau2)

    def functionals(self, **params) -> dict:
        return {
            "mu": Functional("mu", lambda b: b["mu"][:, 0]),
            "mu_squared": Functional("mu_squared", lambda b: b["mu"][:, 0] ** 2),
        }

    def check_state(self, blocks) -> None:
        if not np.all(np.isfinite(blocks["mu"])):
            raise NumericError("mu must be finite")


def exact_posterior(model: NormalNormalModel, data: Dataset, w=None) -> tuple:
    """Closed-form (mean, variance) of mu under the case-weighted likelihood."""
    w = as_weights(w, data)
    precision = w.sum() / model.sigma2 + 1.0 / model.tau2
    if not precision > 0:
        raise DomainError(f"posterior precision {precision} is not positive")
    mean = (np.dot(w, data.points) / model.sigma2 + model.mu0 / model.tau2) / precision
    return float(mean), float(1.0 / precision)


@dataclass(frozen=True)
class TruncatedDPMixtureModel:
    """Truncated stick-breaking mixture of univariate Gaussians.

    The last stick is fixed to 1.  Case weights multiply each point's
    complete-data term log pi_{z_n} + log N(x_n | mu_{z_n}, obs_var), which
    keeps the blocked Gibbs conditionals conjugate for any w_n >= 0 and makes
    w_n = 0 equivalent to deleting the point.
    """

    K: int = 20
    alpha: float = 1.0
    comp_prior_var: float = 25.0
    obs_var: float = 1.0
    comp_prior_mean: float = 0.0
    stick_prior: Optional[DependentStickPrior] = None

    kind = "dp_mixture"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise DomainError(f"truncation K must be an integer >= 2, got {self.K}")
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")
        if not self.comp_prior_var > 0 or not self.obs_var > 0:
            raise DomainError("variances must be positive")

    @property
    def hyperparameters(self) -> tuple:
        return ("alpha", "comp_prior_mean") if self.stick_prior is None else ("rho", "comp_prior_mean")

    @property
    def tag(self) -> str:
        sp = "beta" if self.stick_prior is None else (
            f"logit_normal(rho={self.stick_prior.rho!r},"
            f"base_mean={self.stick_prior.base_mean!r},base_var={self.stick_prior.base_var!r})")
        return (f"dp_mixture(K={self.K},alpha={self.alpha!r},"
                f"comp_prior_mean={self.comp_prior_mean!r},"
                f"comp_prior_var={self.comp_prior_var!r},obs_var={self.obs_var!r},"
                f"sticks={sp})")

    @property
    def sticks_prior(self):
        return self.stick_prior if self.stick_prior is not None else BetaStickPrior(self.alpha)

    def layout(self, n_points: int) -> dict:
        K = self.K
        return {"sticks": (0, K), "comp_means": (K, 2 * K),
                "assignments": (2 * K, 2 * K + n_points)}

    def log_prior_batch(self, blocks) -> np.ndarray:
        v = blocks["sticks"][:, : self.K - 1]
        lp = self.sticks_prior.logpdf(v)
        lp = lp + _normal_logpdf(blocks["comp_means"], self.comp_prior_mean,
                                 self.comp_prior_var).sum(axis=-1)
        return lp

    def loglik_batch(self, blocks, data: Dataset) -> np.ndarray:
        """Complete-data per-point terms, shape (S, N)."""
        z = blocks["assignments"].astype(np.int64)
        logw = _log_stick_weights(blocks["sticks"])
        mu = np.take_along_axis(blocks["comp_means"], z, axis=1)
        lw = np.take_along_axis(logw, z, axis=1)
        return lw + _normal_logpdf(data.points[None, :], mu, self.obs_var)

    def per_point_loglik(self, state, x: float, n: Optional[int] = None) -> float:
        """log pi_{z_n} + log N(x | mu_{z_n}); ``n`` selects z_n from the state."""
        b = _batched(state)
        if n is None:
            raise DimensionError("mixture per-point term needs the point index n")
        k = int(b["assignments"][0, n])
        logw = _log_stick_weights(b["sticks"][0])
        val = float(logw[k] + _normal_logpdf(x, b["comp_means"][0, k], self.obs_var))
        if not math.isfinite(val):
            raise NumericError(f"non-finite log likelihood for point {n}", index=n)
        return val

    def mixture_log_density(self, blocks, x) -> np.ndarray:
        """log sum_k pi_k N(x | mu_k, obs_var) for each draw and each x: shape (S, len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        logw = _log_stick_weights(blocks["sticks"])
        comp = _normal_logpdf(x[None, :, None], blocks["comp_means"][:, None, :], self.obs_var)
        return logsumexp(logw[:, None, :] + comp, axis=-1)

    def dlogjoint_dalpha(self, blocks) -> np.ndarray:
        if self.stick_prior is not None:
            raise DomainError("alpha does not enter a model with a dependent stick prior")
        v = blocks["sticks"][:, : self.K - 1]
        if np.any(v >= 1.0):
            s, k = np.argwhere(v >= 1.0)[0]
            raise SingularityError(
                f"stick {k} equals 1 in draw {s}; log(1 - v) is undefined", index=(int(s), int(k)))
        return (self.K - 1) / self.alpha + np.log1p(-v).sum(axis=-1)

    def dlogjoint_drho(self, blocks) -> np.ndarray:
        if self.stick_prior is None:
            raise DomainError("model has no dependent stick prior")
        return self.stick_prior.dlogpdf_drho(blocks["sticks"][:, : self.K - 1])

    def hyper_score(self, name: str, blocks, data, w) -> np.ndarray:
        if name == "alpha":
            return self.dlogjoint_dalpha(blocks)
        if name == "rho":
            return self.dlogjoint_drho(blocks)
        if name == "comp_prior_mean":
            return (blocks["comp_means"] - self.comp_prior_mean).sum(axis=-1) / self.comp_prior_var
        raise KeyError(f"dp_mixture has no hyperparameter {name!r}")

    def with_hyper(self, name: str, value: float) -> "TruncatedDPMixtureModel":
        if name == "alpha":
            return _replace(self, alpha=value)
        if name == "rho" and self.stick_prior is not None:
            sp = self.stick_prior
            return _replace(self, stick_prior=DependentStickPrior(value, sp.base_mean, sp.base_var))
        if name == "comp_prior_mean":
            return _replace(self, comp_prior_mean=value)
        raise KeyError(f"dp_mixture has no hyperparameter {name!r}")

    def functionals(self, at: float = 0.0, **params) -> dict:
        return {
            "predictive_density": Functional(
                "predictive_density",
                lambda b: np.exp(self.mixture_log_density(b, at)[:, 0])),
            "first_stick": Functional("first_stick", lambda b: b["sticks"][:, 0]),
            "n_clusters": Functional("n_clusters", occupied_clusters),
        }

    def check_state(self, blocks) -> None:
        v = blocks["sticks"]
        if np.any(v <= 0) or np.any(v > 1) or np.any(v[:, -1] != 1.0):
            raise DomainError("invalid sticks in state")
        z = blocks["assignments"]
        if np.any(z < 0) or np.any(z >= self.K):
            raise DomainError("assignment out of range")


def _replace(model, **changes):
    from dataclasses import replace
    return replace(model, **changes)


def occupied_clusters(blocks) -> np.ndarray:
    """Number of distinct components among z_1..z_N, per draw."""
    z = np.sort(blocks["assignments"], axis=1)
    return 1.0 + (np.diff(z, axis=1) != 0).sum(axis=1)


Model = Union[NormalNormalModel, TruncatedDPMixtureModel]


# ---------------------------------------------------------------------------
# Single-state API
# ---------------------------------------------------------------------------


def log_prior(model: Model, state) -> float:
    return float(model.log_prior_batch(_batched(state))[0])


def per_point_loglik(model: Model, state, x_n: float, n: Optional[int] = None) -> float:
    return model.per_point_loglik(state, x_n, n)


def weighted_log_joint(model: Model, state, data: Dataset, w=None) -> float:
    """sum_n w_n log P(x_n | state) + log P(state).

    Terms with w_n == 0 are skipped entirely so a point with -inf likelihood
    can still be dropped.
    """
    w = as_weights(w, data)
    b = _batched(state)
    lp = float(model.log_prior_batch(b)[0])
    if not math.isfinite(lp):
        raise NumericError("non-finite log prior", index="prior")
    ll = model.loglik_batch(b, data)[0]
    active = w != 0.0
    bad = active & ~np.isfinite(ll)
    if np.any(bad):
        n = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite log likelihood at point {n}", index=n)
    total = lp + float(np.dot(w[active], ll[active]))
    if not math.isfinite(total):
        raise NumericError("non-finite weighted log joint")
    return total


def dlogjoint_dalpha(model: TruncatedDPMixtureModel, state, data=None, w=None) -> float:
    """sum_{k<K} [1/alpha + log(1 - v_k)] under independent Beta(1, alpha) sticks."""
    return float(model.dlogjoint_dalpha(_batched(state))[0])


def log_beta_stick_density(v, alpha: float) -> float:
    """log prod Beta(v_k | 1, alpha) via the general Beta normaliser (used as an oracle)."""
    v = np.asarray(v, dtype=float)
    lognorm = gammaln(1.0 + alpha) - gammaln(1.0) - gammaln(alpha)
    return float(np.sum(lognorm + (alpha - 1.0) * np.log1p(-v)))
