"""Posterior samplers, the SampleChain container, and chain diagnostics."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
from scipy.special import betaincinv

from .errors import DiagnosticsError, DomainError, InsufficientSamplesError
from .models import (
    STICK_MAX,
    STICK_MIN,
    Dataset,
    Functional,
    Model,
    NormalNormalModel,
    TruncatedDPMixtureModel,
    _batched,
    _log_stick_weights,
    as_weights,
    exact_posterior,
)

logger = logging.getLogger(__name__)

INT_BLOCKS = ("assignments",)


@dataclass(frozen=True)
class SamplerConfig:
    n_draws: int = 10_000
    n_burnin: int = 1_000
    thin: int = 1
    seed: int = 0
    mh_step_size: float = 0.5

    def __post_init__(self):
        for name in ("n_draws", "thin"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be a positive integer")
        if int(self.n_burnin) < 0:
            raise DomainError("n_burnin must be non-negative")
        # zero is allowed so that a degenerate proposal is reported by diagnostics
        if not self.mh_step_size >= 0:
            raise DomainError("mh_step_size must be non-negative")
        if self.n_draws < 100:
            logger.warning("n_draws=%d is below 100; sensitivity estimates will be unreliable",
                           self.n_draws)

    def replace(self, **changes) -> "SamplerConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class SampleChain:
    draws: np.ndarray
    layout: Mapping[str, tuple]
    rng_seed: int = 0
    model_tag: str = ""
    cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=float)
        if d.ndim != 2 or d.shape[0] < 1:
            raise InsufficientSamplesError("a chain needs at least one draw")
        cols = sorted(self.layout.values())
        covered = [c for lo, hi in cols for c in range(lo, hi)]
        if covered != list(range(d.shape[1])):
            raise DomainError("state_layout must cover every column exactly once")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)
        object.__setattr__(self, "layout", dict(self.layout))

    @property
    def S(self) -> int:
        return int(self.draws.shape[0])

    def block(self, name: str) -> np.ndarray:
        lo, hi = self.layout[name]
        out = self.draws[:, lo:hi]
        return out.astype(np.int64) if name in INT_BLOCKS else out

    @property
    def blocks(self) -> dict:
        if "blocks" not in self.cache:
            self.cache["blocks"] = {name: self.block(name) for name in self.layout}
        return self.cache["blocks"]

    def evaluate(self, phi: Functional) -> np.ndarray:
        key = ("phi", phi)
        if key not in self.cache:
            self.cache[key] = phi.batch(self.blocks)
        return self.cache[key]

    def loglik_terms(self, model: Model, data: Dataset) -> np.ndarray:
        """Per-draw, per-point log likelihood terms, memoised on the chain."""
        key = ("loglik", model.tag, data.points.tobytes())
        if key not in self.cache:
            self.cache[key] = model.loglik_batch(self.blocks, data)
        return self.cache[key]

    def state(self, s: int) -> dict:
        return {name: blk[s] for name, blk in self.blocks.items()}

    def column_names(self) -> list:
        names = [None] * self.draws.shape[1]
        for name, (lo, hi) in self.layout.items():
            if name == "mu" and hi - lo == 1:
                names[lo] = name
            else:
                for j in range(lo, hi):
                    names[j] = f"{name}[{j - lo}]"
        return names

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# model_tag: {self.model_tag}\n")
            fh.write(f"# rng_seed: {self.rng_seed}\n")
            fh.write(",".join(self.column_names()) + "\n")
            for row in self.draws:
                fh.write(",".join(format(x, ".17g") for x in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "SampleChain":
        meta = {}
        header = None
        rows = []
        with open(Path(path), encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    key, _, val = line[1:].partition(":")
                    meta[key.strip()] = val.strip()
                elif header is None:
                    header = line.split(",")
                elif line:
                    rows.append([float(x) for x in line.split(",")])
        layout = {}
        for j, col in enumerate(header):
            m = re.fullmatch(r"(\w+)\[(\d+)\]", col)
            name = m.group(1) if m else col
            lo, hi = layout.get(name, (j, j))
            layout[name] = (lo, j + 1)
        return cls(np.array(rows, dtype=float), layout,
                   rng_seed=int(meta.get("rng_seed", 0)), model_tag=meta.get("model_tag", ""))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def gibbs_normal_normal(model: NormalNormalModel, data: Dataset, w, config: SamplerConfig) -> SampleChain:
    """Independent draws from the exact weighted posterior of mu."""
    mean, var = exact_posterior(model, data, w)
    rng = np.random.default_rng(config.seed)
    draws = rng.normal(mean, math.sqrt(var), size=(config.n_draws, 1))
    return SampleChain(draws, model.layout(data.N), config.seed, model.tag)


def gibbs_dp_mixture(model: TruncatedDPMixtureModel, data: Dataset, w, config: SamplerConfig) -> SampleChain:
    """Blocked Gibbs sampler for the truncated stick-breaking mixture.

    Sweeps z | v, mu; v | z; mu | z, x.  Case weights enter as weighted
    counts and weighted sums.  Under a dependent stick prior the stick block
    is updated by single-site random-walk Metropolis on logit(v).
    """
    w = as_weights(w, data)
    x = data.points
    N, K = data.N, model.K
    rng = np.random.default_rng(config.seed)
    prior_prec = 1.0 / model.comp_prior_var
    prior_term = model.comp_prior_mean * prior_prec
    obs_prec = 1.0 / model.obs_var
    wx = w * x
    zero_w = w == 0.0

    z = rng.integers(0, K, size=N)
    v = np.ones(K)
    eta = np.zeros(K - 1)
    mu = np.empty(K)
    dep = model.stick_prior
    n_keep = config.n_draws
    out = np.empty((n_keep, 2 * K + N))
    total = config.n_burnin + n_keep * config.thin
    accepted = 0
    proposed = 0
    kept = 0

    for it in range(total):
        counts = np.bincount(z, weights=w, minlength=K)
        sums = np.bincount(z, weights=wx, minlength=K)
        after = counts.sum() - np.cumsum(counts)

        if dep is None:
            # inverse-CDF draw: one uniform per stick keeps streams aligned across
            # hyperparameter values, so a shared seed gives common random numbers
            v[:-1] = betaincinv(1.0 + counts[:-1], model.alpha + after[:-1], rng.random(K - 1))
        else:
            acc = _stick_mh_sweep(eta, counts[:-1], after[:-1], dep, config.mh_step_size, rng)
            accepted += acc
            proposed += K - 1
            v[:-1] = 1.0 / (1.0 + np.exp(-eta))
        np.clip(v[:-1], STICK_MIN, STICK_MAX, out=v[:-1])

        prec = prior_prec + counts * obs_prec
        mu[:] = (prior_term + sums * obs_prec) / prec + rng.standard_normal(K) / np.sqrt(prec)

        logw = _log_stick_weights(v)
        logp = logw[None, :] - 0.5 * obs_prec * (x[:, None] - mu[None, :]) ** 2
        logp *= w[:, None]
        logp[zero_w] = 0.0
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        cum = np.cumsum(p, axis=1)
        u = rng.random(N) * cum[:, -1]
        z = (cum < u[:, None]).sum(axis=1)
        np.minimum(z, K - 1, out=z)

        if it >= config.n_burnin and (it - config.n_burnin) % config.thin == 0:
            row = out[kept]
            row[:K] = v
            row[K:2 * K] = mu
            row[2 * K:] = z
            kept += 1

    if dep is not None and proposed:
        logger.info("stick MH acceptance rate %.3f", accepted / proposed)
    return SampleChain(out, model.layout(N), config.seed, model.tag)


def _softplus(a: float) -> float:
    return max(a, 0.0) + math.log1p(math.exp(-abs(a)))


def _stick_mh_sweep(eta, counts, after, prior, step, rng) -> int:
    """One pass of single-site random-walk MH over logit sticks, in place."""
    d = eta.size
    lam_perp = prior.base_var * (1.0 - prior.rho)
    lam_one = prior.base_var * (1.0 + (d - 1) * prior.rho)
    y = eta - prior.base_mean
    sy = float(y.sum())
    sq = float((y ** 2).sum())

    def quad(sy_, sq_):
        return (sq_ - sy_ * sy_ / d) / lam_perp + sy_ * sy_ / (d * lam_one)

    q = quad(sy, sq)
    steps = rng.standard_normal(d) * step
    logu = np.log(rng.random(d))
    acc = 0
    for k in range(d):
        old = float(eta[k])
        new = old + float(steps[k])
        yo, yn = old - prior.base_mean, new - prior.base_mean
        sy_n = sy - yo + yn
        sq_n = sq - yo * yo + yn * yn
        q_n = quad(sy_n, sq_n)
        c, r = float(counts[k]), float(after[k])
        # log v = -softplus(-eta), log(1 - v) = -softplus(eta)
        dlik = (-c * (_softplus(-new) - _softplus(-old))
                - r * (_softplus(new) - _softplus(old)))
        if logu[k] < -0.5 * (q_n - q) + dlik:
            eta[k] = new
            sy, sq, q = sy_n, sq_n, q_n
            acc += 1
    return acc


def mh_generic(model: Model, data: Dataset, w, config: SamplerConfig, init_state) -> SampleChain:
    """Random-walk Metropolis over a model whose state is entirely continuous."""
    if isinstance(model, TruncatedDPMixtureModel):
        raise DomainError("mh_generic handles continuous-state models only")
    w = as_weights(w, data)
    layout = model.layout(data.N)
    init = _batched(init_state)
    dim = max(hi for _, hi in layout.values())
    current = np.empty(dim)
    for name, (lo, hi) in layout.items():
        current[lo:hi] = np.ravel(init[name])

    def logp(vec):
        blocks = {name: vec[None, lo:hi] for name, (lo, hi) in layout.items()}
        return float(model.log_prior_batch(blocks)[0] + model.loglik_batch(blocks, data)[0] @ w)

    lp = logp(current)
    if not math.isfinite(lp):
        raise DomainError("weighted log joint is not finite at the initial state")
    rng = np.random.default_rng(config.seed)
    total = config.n_burnin + config.n_draws * config.thin
    noise = rng.standard_normal((total, dim)) * config.mh_step_size
    logu = np.log(rng.random(total))
    out = np.empty((config.n_draws, dim))
    moves = burn_moves = kept = 0
    for it in range(total):
        prop = current + noise[it]
        lp_prop = logp(prop)
        if logu[it] < lp_prop - lp and not np.array_equal(prop, current):
            current, lp = prop, lp_prop
            moves += 1
            if it < config.n_burnin:
                burn_moves += 1
        if it >= config.n_burnin and (it - config.n_burnin) % config.thin == 0:
            out[kept] = current
            kept += 1
        if it == config.n_burnin - 1 and burn_moves == 0:
            raise DiagnosticsError("random-walk MH never moved during burn-in "
                                   f"(step size {config.mh_step_size})")
    if moves == 0:
        raise DiagnosticsError(f"random-walk MH never moved (step size {config.mh_step_size})")
    logger.info("MH acceptance rate %.3f", moves / total)
    return SampleChain(out, layout, config.seed, model.tag)


def sample_posterior(model: Model, data: Dataset, w, config: SamplerConfig) -> SampleChain:
    """Dispatch to the default sampler for ``model``."""
    if isinstance(model, NormalNormalModel):
        return gibbs_normal_normal(model, data, w, config)
    if isinstance(model, TruncatedDPMixtureModel):
        if data.N < 1:
            raise DomainError("empty data")
        return gibbs_dp_mixture(model, data, w, config)
    raise TypeError(f"no sampler for {type(model).__name__}")


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def _values(chain_or_values, functional: Optional[Functional] = None) -> np.ndarray:
    if isinstance(chain_or_values, SampleChain):
        if functional is None:
            raise TypeError("a functional is required to evaluate a SampleChain")
        return chain_or_values.evaluate(functional)
    return np.asarray(chain_or_values, dtype=float)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(chain: Union[SampleChain, np.ndarray], functional: Optional[Functional] = None) -> float:
    """Effective sample size via Geyer's initial positive sequence."""
    x = _values(chain, functional)
    n = x.size
    if n < 10:
        raise InsufficientSamplesError("ESS needs at least 10 draws")
    if np.ptp(x) == 0.0:
        return float(n)
    rho = autocorrelation(x)
    n_pairs = n // 2
    gam = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    nonpos = np.flatnonzero(gam <= 0.0)
    stop = nonpos[0] if nonpos.size else n_pairs
    tau = -1.0 + 2.0 * gam[:stop].sum()
    if tau <= 0:
        return float(n)
    return float(min(max(n / tau, 1.0), n))


def batch_means_se(x: np.ndarray) -> float:
    """MC standard error of mean(x) by non-overlapping batch means, floor(sqrt(S)) batches."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return 0.0
    n_batches = int(math.isqrt(n))
    if n_batches < 2:
        return float(np.std(x, ddof=1) / math.sqrt(n))
    size = n // n_batches
    means = x[: n_batches * size].reshape(n_batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


def batch_means_se_columns(x: np.ndarray) -> np.ndarray:
    """Column-wise batch_means_se for an (S, N) array."""
    n = x.shape[0]
    if n < 2:
        return np.zeros(x.shape[1])
    n_batches = int(math.isqrt(n))
    if n_batches < 2:
        return np.std(x, axis=0, ddof=1) / math.sqrt(n)
    size = n // n_batches
    means = x[: n_batches * size].reshape(n_batches, size, -1).mean(axis=1)
    return np.std(means, axis=0, ddof=1) / math.sqrt(n_batches)


def expectation(chain: Union[SampleChain, np.ndarray], functional: Optional[Functional] = None) -> tuple:
    """Posterior mean of a functional and its batch-means MC-SE."""
    x = _values(chain, functional)
    return float(np.mean(x)), batch_means_se(x)
