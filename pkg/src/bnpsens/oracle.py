"""Brute-force ground truth: finite differences over full re-inference, drop-one refits."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .errors import SensitivityError
from .models import Dataset, Functional, Model, as_weights
from .sampler import SamplerConfig, expectation, sample_posterior

Pipeline = Callable[[float, int], Union[float, Tuple[float, float]]]


@dataclass(frozen=True)
class FDSpec:
    step: float = 1e-2
    scheme: str = "central"
    seeds: tuple = (1, 2)
    shared_seed: bool = False
    chain_size: Optional[int] = None
    parallel: bool = False

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.scheme not in ("central", "forward"):
            raise ValueError(f"unknown finite-difference scheme {self.scheme!r}")

    def seed_pair(self) -> tuple:
        return (self.seeds[0], self.seeds[0]) if self.shared_seed else tuple(self.seeds)


@dataclass(frozen=True)
class ComparisonReport:
    linear_estimate: float
    oracle_value: float
    abs_error: float
    combined_se: float
    z_score: float
    verdict: str

    @property
    def consistent(self) -> bool:
        return self.verdict == "consistent"

    def to_dict(self) -> dict:
        return asdict(self)


class PipelineError(SensitivityError, RuntimeError):
    def __init__(self, omega, cause):
        super().__init__(f"pipeline failed at omega={omega!r}: {cause}")
        self.omega = omega


def _evaluate(pipeline: Pipeline, omega: float, seed: int) -> tuple:
    try:
        out = pipeline(omega, seed)
    except Exception as exc:  # re-raised with the offending omega attached
        raise PipelineError(omega, exc) from exc
    if isinstance(out, tuple):
        return float(out[0]), float(out[1])
    return float(out), 0.0


def fd_derivative(pipeline: Pipeline, omega0: float, spec: FDSpec) -> tuple:
    """Finite-difference derivative of ``pipeline(omega, seed) -> E or (E, se)``.

    Returns (value, se); se propagates the two expectations' MC-SEs as if
    independent.
    """
    h = spec.step
    s_plus, s_minus = spec.seed_pair()
    if spec.scheme == "central":
        points = [(omega0 + h, s_plus), (omega0 - h, s_minus)]
        denom = 2.0 * h
    else:
        points = [(omega0 + h, s_plus), (omega0, s_minus)]
        denom = h
    if spec.parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            (e_hi, se_hi), (e_lo, se_lo) = pool.map(lambda p: _evaluate(pipeline, *p), points)
    else:
        (e_hi, se_hi), (e_lo, se_lo) = [_evaluate(pipeline, *p) for p in points]
    value = (e_hi - e_lo) / denom
    se = math.hypot(se_hi, se_lo) / denom
    return value, se


def refit_drop_one(model: Model, data: Dataset, w_base, n: int, sampler_config: SamplerConfig,
                   phi: Functional) -> tuple:
    """(E[phi], MC-SE) after re-running inference with w_n set to 0."""
    w = np.array(as_weights(w_base, data), dtype=float)
    if not 0 <= n < data.N:
        raise IndexError(f"point index {n} out of range for N={data.N}")
    w[n] = 0.0
    chain = sample_posterior(model, data, w, sampler_config)
    return expectation(chain, phi)


def refit_deleted(model: Model, data: Dataset, w_base, n: int, sampler_config: SamplerConfig,
                  phi: Functional) -> tuple:
    """(E[phi], MC-SE) with point n physically removed from the data."""
    w = np.delete(np.asarray(as_weights(w_base, data), dtype=float), n)
    chain = sample_posterior(model, data.without(n), w, sampler_config)
    return expectation(chain, phi)


def compare(linear: float, linear_se: float, oracle: float, oracle_se: float) -> ComparisonReport:
    combined = math.hypot(linear_se, oracle_se)
    diff = linear - oracle
    if combined > 0:
        z = diff / combined
    elif diff == 0:
        z = 0.0
    else:
        z = math.copysign(math.inf, diff)
    verdict = "consistent" if abs(z) <= 3.0 else "inconsistent"
    return ComparisonReport(linear, oracle, abs(diff), combined, z, verdict)


def weight_pipeline(model: Model, data: Dataset, w_base, n: int, phi: Functional,
                    sampler_config: SamplerConfig) -> Pipeline:
    """omega -> E[phi | w_n = omega] by re-running the sampler."""
    base = np.array(as_weights(w_base, data), dtype=float)

    def run(omega, seed):
        w = base.copy()
        w[n] = omega
        chain = sample_posterior(model, data, w, sampler_config.replace(seed=seed))
        return expectation(chain, phi)

    return run


def hyper_pipeline(model: Model, data: Dataset, w, name: str, phi: Functional,
                   sampler_config: SamplerConfig) -> Pipeline:
    """omega -> E[phi] under the model with hyperparameter ``name`` set to omega."""

    def run(omega, seed):
        chain = sample_posterior(model.with_hyper(name, omega), data, w,
                                 sampler_config.replace(seed=seed))
        return expectation(chain, phi)

    return run
