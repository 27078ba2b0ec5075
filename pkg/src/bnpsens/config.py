"""Experiment configuration: TOML schema, resolution, and whole-file validation."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

MODEL_KINDS = ("normal_normal", "dp_mixture")
TARGET_KINDS = ("case_influence", "hyper", "esb_rho", "eb", "loss_mean_median")
FUNCTIONALS = {
    "normal_normal": ("mu", "mu_squared"),
    "dp_mixture": ("predictive_density", "first_stick", "n_clusters"),
}
WEIGHT_RE = re.compile(r"w\[(\d+)\]")


@dataclass
class TargetSpec:
    kind: str
    functional: str
    at: float = 0.0
    hyperparameter: Optional[str] = None
    extrapolate: Optional[float] = None
    points: Optional[list] = None


@dataclass
class ValidationSpec:
    enabled: bool = False
    step: float = 1e-2
    scheme: str = "central"
    seeds: tuple = (101, 202)
    shared_seed: bool = False
    chain_size: Optional[int] = None


@dataclass
class EBSpec:
    bracket: tuple = (1e-3, 1e3)
    tol: float = 0.05
    rel_width: float = 1e-3
    n_draws: int = 5000
    n_burnin: int = 500
    common_random_numbers: bool = True


@dataclass
class ExperimentConfig:
    name: str
    model: dict
    data: list
    sampler: dict
    targets: list
    validation: ValidationSpec = field(default_factory=ValidationSpec)
    empirical_bayes: EBSpec = field(default_factory=EBSpec)
    output_dir: str = "out"
    dump_chain: bool = False
    source: Optional[str] = None


class _Collector:
    def __init__(self):
        self.errors = []

    def add(self, path, msg):
        self.errors.append((path, msg))

    def number(self, table, key, path, default=None, *, positive=False, nonneg=False,
               integer=False, lo=None, hi=None):
        val = table.get(key, default)
        full = f"{path}.{key}"
        if val is None:
            self.add(full, "is required")
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.add(full, f"must be a number, got {val!r}")
            return None
        if not math.isfinite(val):
            self.add(full, "must be finite")
            return None
        if integer and int(val) != val:
            self.add(full, f"must be an integer, got {val!r}")
            return None
        if positive and not val > 0:
            self.add(full, f"must be positive, got {val!r}")
        if nonneg and not val >= 0:
            self.add(full, f"must be non-negative, got {val!r}")
        if lo is not None and not val > lo:
            self.add(full, f"must be > {lo}, got {val!r}")
        if hi is not None and not val < hi:
            self.add(full, f"must be < {hi}, got {val!r}")
        return int(val) if integer else float(val)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def validate_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse and check a config file; raises ConfigError listing every problem."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([("<file>", f"{path} does not exist")])
    try:
        raw = load_toml(path)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("<file>", f"TOML parse error: {exc}")]) from exc
    return parse_config(raw, base_dir=path.parent, source=str(path), overrides=overrides)


def parse_config(raw: dict, base_dir=".", source=None, overrides=None) -> ExperimentConfig:
    c = _Collector()
    base_dir = Path(base_dir)
    known = {"name", "model", "data", "sampler", "targets", "validation",
             "empirical_bayes", "output_dir", "dump_chain"}
    for key in raw:
        if key not in known:
            c.add(key, "unknown top-level key")

    model = _parse_model(raw.get("model"), c)
    data = _parse_data(raw.get("data"), base_dir, c)
    sampler = _parse_sampler(raw.get("sampler", {}), c)
    targets = _parse_targets(raw.get("targets"), model, data, c)
    validation = _parse_validation(raw.get("validation", {}), c)
    eb = _parse_eb(raw.get("empirical_bayes", {}), c)

    if c.errors:
        raise ConfigError(c.errors)
    cfg = ExperimentConfig(
        name=str(raw.get("name", Path(source).stem if source else "experiment")),
        model=model, data=data, sampler=sampler, targets=targets,
        validation=validation, empirical_bayes=eb,
        output_dir=str(raw.get("output_dir", "out")),
        dump_chain=bool(raw.get("dump_chain", False)), source=source)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "seed":
            cfg.sampler["seed"] = int(val)
        elif key == "output_dir":
            cfg.output_dir = str(val)
        elif key == "dump_chain":
            cfg.dump_chain = cfg.dump_chain or bool(val)
    return cfg


def _parse_model(tbl, c) -> dict:
    if not isinstance(tbl, dict):
        c.add("model", "missing [model] table")
        return {}
    kind = tbl.get("kind")
    if kind not in MODEL_KINDS:
        c.add("model.kind", f"unknown model kind {kind!r} (expected one of {', '.join(MODEL_KINDS)})")
        return {"kind": kind}
    out = {"kind": kind}
    if kind == "normal_normal":
        out["sigma2"] = c.number(tbl, "sigma2", "model", 1.0, positive=True)
        out["mu0"] = c.number(tbl, "mu0", "model", 0.0)
        out["tau2"] = c.number(tbl, "tau2", "model", 1.0, positive=True)
    else:
        K = c.number(tbl, "K", "model", 20, integer=True)
        if K is not None and K < 2:
            c.add("model.K", f"must be >= 2, got {K}")
        out["K"] = K
        out["alpha"] = c.number(tbl, "alpha", "model", 1.0, positive=True)
        out["comp_prior_mean"] = c.number(tbl, "comp_prior_mean", "model", 0.0)
        out["comp_prior_var"] = c.number(tbl, "comp_prior_var", "model", 25.0, positive=True)
        out["obs_var"] = c.number(tbl, "obs_var", "model", 1.0, positive=True)
        sp = tbl.get("stick_prior")
        if sp is not None:
            if not isinstance(sp, dict):
                c.add("model.stick_prior", "must be a table")
            elif sp.get("kind", "logit_normal") != "logit_normal":
                c.add("model.stick_prior.kind", f"unknown stick prior {sp.get('kind')!r}")
            else:
                rho = c.number(sp, "rho", "model.stick_prior", 0.0, lo=-1.0, hi=1.0)
                if rho is not None and K and K > 2 and not rho > -1.0 / (K - 2):
                    c.add("model.stick_prior.rho", f"must exceed {-1.0 / (K - 2):.6g} for K={K}")
                out["stick_prior"] = {
                    "rho": rho,
                    "base_mean": c.number(sp, "base_mean", "model.stick_prior", 0.0),
                    "base_var": c.number(sp, "base_var", "model.stick_prior", 3.0, positive=True),
                }
    return out


def _parse_data(tbl, base_dir, c) -> list:
    if not isinstance(tbl, dict):
        c.add("data", "missing [data] table")
        return []
    has_values, has_path = "values" in tbl, "path" in tbl
    if has_values == has_path:
        c.add("data", "give exactly one of data.values or data.path")
        return []
    if has_values:
        vals = tbl["values"]
        if not isinstance(vals, list) or not vals:
            c.add("data.values", "must be a non-empty list of numbers")
            return []
        out = []
        for i, v in enumerate(vals):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                c.add(f"data.values[{i}]", f"must be a finite number, got {v!r}")
            else:
                out.append(float(v))
        return out
    from .models import Dataset
    p = Path(tbl["path"])
    if not p.is_absolute():
        p = base_dir / p
    if not p.exists():
        c.add("data.path", f"file {p} not found")
        return []
    try:
        return [float(v) for v in Dataset.from_csv(p, header=tbl.get("header")).points]
    except Exception as exc:
        c.add("data.path", f"could not read {p}: {exc}")
        return []


def _parse_sampler(tbl, c) -> dict:
    if not isinstance(tbl, dict):
        c.add("sampler", "must be a table")
        return {}
    out = {
        "n_draws": c.number(tbl, "n_draws", "sampler", 10_000, positive=True, integer=True),
        "n_burnin": c.number(tbl, "n_burnin", "sampler", 1_000, nonneg=True, integer=True),
        "thin": c.number(tbl, "thin", "sampler", 1, positive=True, integer=True),
        "seed": c.number(tbl, "seed", "sampler", 0, nonneg=True, integer=True),
        "mh_step_size": c.number(tbl, "mh_step_size", "sampler", 0.5, positive=True),
    }
    return out


def _parse_targets(lst, model, data, c) -> list:
    if not isinstance(lst, list) or not lst:
        c.add("targets", "at least one [[targets]] entry is required")
        return []
    kind = model.get("kind")
    has_sticks = "stick_prior" in model
    out = []
    for i, t in enumerate(lst):
        p = f"targets[{i}]"
        if not isinstance(t, dict):
            c.add(p, "must be a table")
            continue
        tk = t.get("kind")
        if tk not in TARGET_KINDS:
            c.add(f"{p}.kind", f"unknown target kind {tk!r} (expected one of {', '.join(TARGET_KINDS)})")
            continue
        fname = t.get("functional")
        if kind in FUNCTIONALS and fname not in FUNCTIONALS[kind]:
            c.add(f"{p}.functional", f"unknown functional {fname!r} for model {kind}")
        at = c.number(t, "at", p, 0.0)
        hyper = t.get("hyperparameter")
        ext = t.get("extrapolate")
        if ext is not None:
            ext = c.number(t, "extrapolate", p)
        points = t.get("points")
        if points is not None and (not isinstance(points, list)
                                   or not all(isinstance(n, int) and 0 <= n < len(data) for n in points)):
            c.add(f"{p}.points", f"must be a list of point indices in [0, {len(data)})")

        if tk == "hyper":
            allowed = {"normal_normal": ("mu0",),
                       "dp_mixture": ("comp_prior_mean",) if has_sticks else ("alpha", "comp_prior_mean")}
            if kind in allowed and hyper not in allowed[kind]:
                c.add(f"{p}.hyperparameter",
                      f"{hyper!r} is not a hyperparameter of {kind}"
                      + (" with a dependent stick prior (use kind = \"esb_rho\" for rho)" if has_sticks else ""))
        elif tk == "esb_rho":
            if kind != "dp_mixture" or not has_sticks:
                c.add(f"{p}.kind", "esb_rho needs a dp_mixture model with a [model.stick_prior] "
                                   "(this model has no dependent sticks)")
        elif tk == "eb":
            if kind != "dp_mixture" or has_sticks:
                c.add(f"{p}.kind", "eb needs a dp_mixture model with the default Beta(1, alpha) sticks")
            m = WEIGHT_RE.fullmatch(hyper or "")
            if hyper != "comp_prior_mean" and not (m and int(m.group(1)) < len(data)):
                c.add(f"{p}.hyperparameter",
                      f"eb omega must be 'w[n]' with n < N or 'comp_prior_mean', got {hyper!r}")
        out.append(TargetSpec(tk, fname, at if at is not None else 0.0, hyper, ext, points))
    return out


def _parse_validation(tbl, c) -> ValidationSpec:
    if not isinstance(tbl, dict):
        c.add("validation", "must be a table")
        return ValidationSpec()
    spec = ValidationSpec(enabled=bool(tbl.get("enabled", False)))
    spec.step = c.number(tbl, "step", "validation", 1e-2, positive=True)
    scheme = tbl.get("scheme", "central")
    if scheme not in ("central", "forward"):
        c.add("validation.scheme", f"must be 'central' or 'forward', got {scheme!r}")
    spec.scheme = scheme
    seeds = tbl.get("seeds", [101, 202])
    if not (isinstance(seeds, list) and len(seeds) == 2 and all(isinstance(s, int) and s >= 0 for s in seeds)):
        c.add("validation.seeds", "must be a pair of non-negative integers")
    else:
        spec.seeds = tuple(seeds)
    spec.shared_seed = bool(tbl.get("shared_seed", False))
    if "chain_size" in tbl:
        spec.chain_size = c.number(tbl, "chain_size", "validation", positive=True, integer=True)
    return spec


def _parse_eb(tbl, c) -> EBSpec:
    if not isinstance(tbl, dict):
        c.add("empirical_bayes", "must be a table")
        return EBSpec()
    spec = EBSpec()
    br = tbl.get("bracket", list(spec.bracket))
    if not (isinstance(br, list) and len(br) == 2
            and all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in br)
            and 0 < br[0] < br[1]):
        c.add("empirical_bayes.bracket", f"must be [lo, hi] with 0 < lo < hi, got {br!r}")
    else:
        spec.bracket = (float(br[0]), float(br[1]))
    spec.tol = c.number(tbl, "tol", "empirical_bayes", spec.tol, positive=True)
    spec.rel_width = c.number(tbl, "rel_width", "empirical_bayes", spec.rel_width, positive=True)
    spec.n_draws = c.number(tbl, "n_draws", "empirical_bayes", spec.n_draws, positive=True, integer=True)
    spec.n_burnin = c.number(tbl, "n_burnin", "empirical_bayes", spec.n_burnin, nonneg=True, integer=True)
    spec.common_random_numbers = bool(tbl.get("common_random_numbers", True))
    return spec


def describe(cfg: ExperimentConfig) -> dict[str, Any]:
    """Plain-dict view of a resolved config, for echoing into reports."""
    from dataclasses import asdict
    d = asdict(cfg)
    d.pop("source", None)
    d.pop("output_dir", None)
    return d
