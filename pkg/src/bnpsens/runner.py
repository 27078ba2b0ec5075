"""Executes an ExperimentConfig and writes report.json, validation.csv and friends."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import WEIGHT_RE, ExperimentConfig, TargetSpec, describe
from .empirical_bayes import (
    CLUSTER_COUNT,
    EBSolverConfig,
    eb_posterior_expectation,
    eb_sensitivity,
    solve_eb,
)
from .loss_sens import (
    absolute_loss,
    bayes_estimator,
    exact_median_minus_mean,
    loss_sensitivity,
    mean_median_approx,
    mean_to_median,
    smoothing_width,
    squared_loss,
)
from .models import (
    Dataset,
    DependentStickPrior,
    NormalNormalModel,
    TruncatedDPMixtureModel,
    exact_posterior,
)
from .oracle import FDSpec, compare, fd_derivative, hyper_pipeline, weight_pipeline
from .sampler import SamplerConfig, expectation, sample_posterior
from .sensitivity import (
    case_influence,
    esb_rho_sensitivity,
    hyper_sensitivity,
    hyper_score,
    linear_extrapolate,
)

logger = logging.getLogger(__name__)

VALIDATION_COLUMNS = ["experiment", "target", "linear", "oracle", "abs_error",
                      "combined_se", "z", "verdict"]

EXIT_OK, EXIT_INCONSISTENT, EXIT_ERROR = 0, 1, 2


def build_model(spec: dict):
    if spec["kind"] == "normal_normal":
        return NormalNormalModel(spec["sigma2"], spec["mu0"], spec["tau2"])
    sp = spec.get("stick_prior")
    return TruncatedDPMixtureModel(
        K=spec["K"], alpha=spec["alpha"], comp_prior_var=spec["comp_prior_var"],
        obs_var=spec["obs_var"], comp_prior_mean=spec["comp_prior_mean"],
        stick_prior=DependentStickPrior(sp["rho"], sp["base_mean"], sp["base_var"]) if sp else None)


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


class Experiment:
    """One run of a config: shared base chain, per-target results, validation rows."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = build_model(cfg.model)
        self.data = Dataset(cfg.data)
        self.w = np.ones(self.data.N)
        self.sampler = SamplerConfig(**cfg.sampler)
        v = cfg.validation
        self.fd = FDSpec(step=v.step, scheme=v.scheme, seeds=v.seeds, shared_seed=v.shared_seed)
        self.refit_sampler = self.sampler.replace(n_draws=v.chain_size or self.sampler.n_draws)
        self.validation_rows = []
        self.influence_rows = []
        self._chain = None

    @property
    def chain(self):
        if self._chain is None:
            logger.info("sampling base chain (%d draws)", self.sampler.n_draws)
            self._chain = sample_posterior(self.model, self.data, self.w, self.sampler)
        return self._chain

    def functional(self, t: TargetSpec, model=None):
        return (model or self.model).functionals(at=t.at)[t.functional]

    def _exact_pipeline(self, t: TargetSpec, n=None, hyper=None):
        """Closed-form E[phi] for the conjugate model; None when unavailable."""
        if not isinstance(self.model, NormalNormalModel):
            return None

        def run(omega, seed):
            model, w = self.model, self.w.copy()
            if n is not None:
                w[n] = omega
            else:
                model = model.with_hyper(hyper, omega)
            mean, var = exact_posterior(model, self.data, w)
            return mean if t.functional == "mu" else mean * mean + var

        return run

    def validate(self, label: str, linear: float, linear_se: float, pipeline, omega0: float):
        value, se = fd_derivative(pipeline, omega0, self.fd)
        rep = compare(linear, linear_se, value, se)
        self.validation_rows.append({"experiment": self.cfg.name, "target": label, **{
            "linear": rep.linear_estimate, "oracle": rep.oracle_value,
            "abs_error": rep.abs_error, "combined_se": rep.combined_se,
            "z": rep.z_score, "verdict": rep.verdict}})
        logger.info("validation %s: linear=%.6g oracle=%.6g z=%.3g %s",
                    label, linear, value, rep.z_score, rep.verdict)
        return rep.to_dict()

    # -- targets ----------------------------------------------------------

    def run_case_influence(self, t: TargetSpec) -> dict:
        phi = self.functional(t)
        infl = case_influence(self.chain, phi, self.data, self.model)
        base, base_se = expectation(self.chain, phi)
        out = {"base_expectation": base, "base_mc_se": base_se, "influence": infl.to_dict()}
        for n in range(self.data.N):
            self.influence_rows.append([self.cfg.name, t.functional, n, self.data.points[n],
                                        infl.per_point[n], infl.mc_se[n]])
        points = t.points if t.points is not None else [0]
        if t.extrapolate is not None:
            out["extrapolation"] = []
            for n in points:
                rec = {"point": n, "delta_w": t.extrapolate,
                       "linear": linear_extrapolate(base, infl.estimate(n), t.extrapolate)}
                if self.cfg.validation.enabled:
                    exact = self._exact_pipeline(t, n=n)
                    if exact is not None:
                        rec["refit"], rec["refit_mc_se"] = exact(1.0 + t.extrapolate, 0), 0.0
                    else:
                        pipe = weight_pipeline(self.model, self.data, self.w, n, phi, self.refit_sampler)
                        rec["refit"], rec["refit_mc_se"] = pipe(1.0 + t.extrapolate, self.fd.seeds[0])
                out["extrapolation"].append(rec)
        if self.cfg.validation.enabled:
            out["validation"] = []
            for n in points:
                pipe = self._exact_pipeline(t, n=n) or weight_pipeline(
                    self.model, self.data, self.w, n, phi, self.refit_sampler)
                out["validation"].append(self.validate(
                    f"case_influence[{n}]:{t.functional}", infl[n], float(infl.mc_se[n]), pipe, 1.0))
        return out

    def run_hyper(self, t: TargetSpec) -> dict:
        phi = self.functional(t)
        score = hyper_score(self.chain, self.model, self.data, t.hyperparameter, self.w)
        est = hyper_sensitivity(self.chain, phi, score)
        base, base_se = expectation(self.chain, phi)
        omega0 = getattr(self.model, t.hyperparameter)
        out = {"hyperparameter": t.hyperparameter, "omega0": omega0,
               "base_expectation": base, "base_mc_se": base_se, "sensitivity": est.to_dict()}
        if t.extrapolate is not None:
            out["extrapolation"] = {"delta_omega": t.extrapolate,
                                    "linear": linear_extrapolate(base, est, t.extrapolate)}
        if self.cfg.validation.enabled:
            pipe = self._exact_pipeline(t, hyper=t.hyperparameter) or hyper_pipeline(
                self.model, self.data, self.w, t.hyperparameter, phi, self.refit_sampler)
            out["validation"] = self.validate(f"hyper[{t.hyperparameter}]:{t.functional}",
                                              est.value, est.mc_se, pipe, omega0)
        return out

    def run_esb_rho(self, t: TargetSpec) -> dict:
        phi = self.functional(t)
        prior = self.model.stick_prior
        est = esb_rho_sensitivity(self.chain, phi, prior)
        base, base_se = expectation(self.chain, phi)
        out = {"rho0": prior.rho, "base_expectation": base, "base_mc_se": base_se,
               "sensitivity": est.to_dict()}
        if t.extrapolate is not None:
            out["extrapolation"] = {"delta_rho": t.extrapolate,
                                    "linear": linear_extrapolate(base, est, t.extrapolate)}
        if self.cfg.validation.enabled:
            pipe = hyper_pipeline(self.model, self.data, self.w, "rho", phi, self.refit_sampler)
            out["validation"] = self.validate(f"esb_rho:{t.functional}", est.value, est.mc_se,
                                              pipe, prior.rho)
        return out

    def run_eb(self, t: TargetSpec) -> dict:
        ebs = self.cfg.empirical_bayes
        solver = EBSolverConfig(bracket=ebs.bracket, tol=ebs.tol, rel_width=ebs.rel_width,
                                common_random_numbers=ebs.common_random_numbers)
        eb_sampler = self.sampler.replace(n_draws=ebs.n_draws, n_burnin=ebs.n_burnin)
        sol = solve_eb(self.model, self.data, self.w, eb_sampler, solver)
        fitted = self.model.with_hyper("alpha", sol.alpha_hat)
        chain = sample_posterior(fitted, self.data, self.w, self.sampler)
        phi = self.functional(t, fitted)
        bd = eb_sensitivity(chain, phi, CLUSTER_COUNT, fitted, self.data, self.w, t.hyperparameter)
        base, base_se = expectation(chain, phi)
        out = {"omega": t.hyperparameter, "eb_solution": sol.to_dict(),
               "base_expectation": base, "base_mc_se": base_se, "breakdown": bd.to_dict()}
        if t.extrapolate is not None:
            out["extrapolation"] = {"delta_omega": t.extrapolate,
                                    "linear": linear_extrapolate(base, bd.total, t.extrapolate)}
        if self.cfg.validation.enabled:
            m = WEIGHT_RE.fullmatch(t.hyperparameter)

            def pipe(omega, seed):
                model, w = self.model, self.w.copy()
                if m:
                    w[int(m.group(1))] = omega
                else:
                    model = model.with_hyper(t.hyperparameter, omega)
                e, se, _ = eb_posterior_expectation(
                    model, self.data, w, self.functional(t, model),
                    eb_sampler.replace(seed=seed), solver,
                    self.refit_sampler.replace(seed=seed + 1))
                return e, se

            omega0 = 1.0 if m else self.model.comp_prior_mean
            out["validation"] = self.validate(f"eb[{t.hyperparameter}]:{t.functional}",
                                              bd.total, bd.total_se, pipe, omega0)
        return out

    def run_loss_mean_median(self, t: TargetSpec) -> dict:
        phi = self.functional(t)
        x = self.chain.evaluate(phi)
        approx, approx_se = mean_median_approx(x, with_se=True)
        mean_est = bayes_estimator(x, squared_loss())
        deriv = loss_sensitivity(x, mean_to_median(), theta_hat=float(np.mean(x)))
        out = {"loss_sensitivity": {
            "posterior_mean": mean_est.theta_hat,
            "mean_median_approx": approx, "mc_se": approx_se,
            "loss_path_derivative": deriv,
            "linear_median": linear_extrapolate(float(np.mean(x)), approx, 1.0)}}
        if self.cfg.validation.enabled:
            med = bayes_estimator(x, absolute_loss(smoothing_width(x)))
            out["loss_sensitivity"]["refit_median"] = med.theta_hat
            out["loss_sensitivity"]["exact_median_minus_mean"] = exact_median_minus_mean(x)
        return out

    def run(self) -> dict:
        results = []
        for i, t in enumerate(self.cfg.targets):
            logger.info("target %d: %s(%s)", i, t.kind, t.functional)
            res = getattr(self, f"run_{t.kind}")(t)
            results.append({"index": i, "kind": t.kind, "functional": t.functional,
                            "at": t.at, "result": res})
        return {
            "experiment": self.cfg.name,
            "model_tag": self.model.tag,
            "config": describe(self.cfg),
            "n_points": self.data.N,
            "targets": results,
        }


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        if not math.isfinite(val):
            raise ValueError("refusing to serialise a non-finite number to report.json")
        return val
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_report(report: dict, path: Path) -> None:
    text = json.dumps(_to_jsonable(report), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _provenance(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(tb):
        if "bnpsens" in frame.filename:
            return Path(frame.filename).stem
    return type(exc).__module__


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> int:
    """Run every target; returns the CLI exit code (0 ok, 1 inconsistent, 2 error)."""
    out = Path(out_dir or cfg.output_dir)
    started = time.time()
    try:
        exp = Experiment(cfg)
        report = exp.run()
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "report.json")
        if exp.influence_rows:
            _write_csv(out / "influence.csv",
                       ["experiment", "functional", "point", "x", "influence", "mc_se"],
                       exp.influence_rows)
        if cfg.validation.enabled:
            _write_csv(out / "validation.csv", VALIDATION_COLUMNS,
                       [[r[c] for c in VALIDATION_COLUMNS] for r in exp.validation_rows])
        if cfg.dump_chain:
            exp.chain.to_csv(out / "chain.csv")
    except Exception as exc:
        logger.error("[%s] %s: %s", _provenance(exc), type(exc).__name__, exc)
        return EXIT_ERROR
    meta = {"bnpsens_version": __version__, "config": cfg.source,
            "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "elapsed_seconds": round(time.time() - started, 3)}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if any(r["verdict"] != "consistent" for r in exp.validation_rows):
        return EXIT_INCONSISTENT
    return EXIT_OK
