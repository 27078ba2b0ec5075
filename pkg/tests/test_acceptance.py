"""End-to-end acceptance checks.

Each test prints one ``ACCEPTANCE <n> ... PASS|FAIL`` line (shown even when
output capture is on) and then asserts the criterion.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from bnpsens.config import validate_config
from bnpsens.empirical_bayes import (
    CLUSTER_COUNT,
    EBSolverConfig,
    cluster_count_G,
    dG_dalpha,
    eb_posterior_expectation,
    eb_sensitivity,
    solve_eb,
)
from bnpsens.loss_sens import loss_sensitivity, mean_median_approx, mean_to_median
from bnpsens.models import (
    Dataset,
    DependentStickPrior,
    NormalNormalModel,
    TruncatedDPMixtureModel,
    exact_posterior,
)
from bnpsens.oracle import (
    FDSpec,
    compare,
    fd_derivative,
    hyper_pipeline,
    refit_deleted,
    refit_drop_one,
)
from bnpsens.runner import run_experiment
from bnpsens.sampler import SamplerConfig, gibbs_dp_mixture, gibbs_normal_normal
from bnpsens.sensitivity import case_influence, esb_rho_sensitivity, hyper_score, hyper_sensitivity

ROOT = Path(__file__).resolve().parents[1]
NN = NormalNormalModel(sigma2=1.0, mu0=0.0, tau2=1.0)
MU = NN.functionals()["mu"]


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def test_1_conjugate_exactness(verdict):
    t0 = time.perf_counter()
    data = Dataset([2.0])
    chain = gibbs_normal_normal(NN, data, None, SamplerConfig(n_draws=100_000, seed=1))
    est = hyper_sensitivity(chain, MU, hyper_score(chain, NN, data, "mu0"))
    elapsed = time.perf_counter() - t0
    ok = abs(est.value - 0.5) <= 3 * est.mc_se and elapsed < 5
    assert verdict(1, "conjugate exactness", ok,
                   f"dE[mu]/dmu0={est.value:.5f} se={est.mc_se:.2g} time={elapsed:.2f}s")


def test_2_case_influence(verdict):
    t0 = time.perf_counter()
    data = Dataset([2.0])
    chain = gibbs_normal_normal(NN, data, None, SamplerConfig(n_draws=100_000, seed=2))
    infl = case_influence(chain, MU, data, NN).estimate(0)

    def exact(w, seed):
        return exact_posterior(NN, data, [w])[0]

    fd, fd_se = fd_derivative(exact, 1.0, FDSpec(step=0.01))
    rep = compare(infl.value, infl.mc_se, fd, fd_se)
    elapsed = time.perf_counter() - t0
    ok = abs(infl.value - 0.5) <= 3 * infl.mc_se and rep.consistent and elapsed < 10
    assert verdict(2, "case influence", ok,
                   f"influence={infl.value:.5f} se={infl.mc_se:.2g} fd={fd:.6f} z={rep.z_score:.2f} "
                   f"time={elapsed:.2f}s")


_esb_rng = np.random.default_rng(2024)
ESB_DATA = np.concatenate([_esb_rng.normal(-2, 1, 10), _esb_rng.normal(2, 1, 10)])


@pytest.mark.slow
def test_3_esb_rho_sensitivity(verdict):
    t0 = time.perf_counter()
    data = Dataset(ESB_DATA)
    model = TruncatedDPMixtureModel(K=10, obs_var=1.0, comp_prior_var=9.0,
                                    stick_prior=DependentStickPrior(0.0, 0.0, 3.0))
    phi = model.functionals(at=0.0)["predictive_density"]
    zs = []
    for rep in range(5):
        cfg = SamplerConfig(n_draws=50_000, n_burnin=1000, seed=100 + rep, mh_step_size=1.5)
        chain = gibbs_dp_mixture(model, data, None, cfg)
        est = esb_rho_sensitivity(chain, phi, model.stick_prior)
        fd, fd_se = fd_derivative(hyper_pipeline(model, data, None, "rho", phi, cfg), 0.0,
                                  FDSpec(step=0.05, seeds=(200 + rep, 300 + rep)))
        zs.append(compare(est.value, est.mc_se, fd, fd_se).z_score)
    elapsed = time.perf_counter() - t0
    n_ok = sum(abs(z) <= 3 for z in zs)
    ok = n_ok >= 4 and elapsed < 300
    assert verdict(3, "ESB rho sensitivity", ok,
                   f"{n_ok}/5 consistent z=[{', '.join(f'{z:.2f}' for z in zs)}] time={elapsed:.0f}s")


@pytest.mark.slow
def test_4_eb_chain_rule(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    data = Dataset(np.concatenate([rng.normal(c, 1, 10) for c in (-6.0, 0.0, 6.0)]))
    model = TruncatedDPMixtureModel(K=20, alpha=1.0, obs_var=1.0, comp_prior_var=25.0)
    phi = model.functionals(at=float(data.points[0]))["predictive_density"]
    eb_cfg = SamplerConfig(n_draws=5000, n_burnin=500, seed=11)
    solver = EBSolverConfig()

    sol = solve_eb(model, data, None, eb_cfg, solver)
    fitted = model.with_hyper("alpha", sol.alpha_hat)
    chain = gibbs_dp_mixture(fitted, data, None, SamplerConfig(n_draws=100_000, n_burnin=1000, seed=5))
    br = eb_sensitivity(chain, phi, CLUSTER_COUNT, fitted, data, None, "w[0]")

    final = SamplerConfig(n_draws=200_000, n_burnin=1000)

    def pipeline(omega, seed):
        w = np.ones(data.N)
        w[0] = omega
        e, se, _ = eb_posterior_expectation(model, data, w, phi, eb_cfg.replace(seed=seed), solver,
                                            final.replace(seed=seed + 1))
        return e, se

    fd, fd_se = fd_derivative(pipeline, 1.0, FDSpec(step=0.05, seeds=(21, 33)))
    rep = compare(br.total, br.total_se, fd, fd_se)
    gap = abs(br.total - (br.direct_term + br.indirect_term))
    elapsed = time.perf_counter() - t0
    ok = rep.consistent and gap <= 1e-12 and elapsed < 900
    assert verdict(4, "EB chain rule", ok,
                   f"total={br.total:.5f} (direct {br.direct_term:.5f} + indirect "
                   f"{br.indirect_term:.5f}) fd={fd:.5f}+-{fd_se:.2g} z={rep.z_score:.2f} "
                   f"identity gap={gap:.1e} alpha_hat={sol.alpha_hat:.4f} time={elapsed:.0f}s")


def _G_longdouble(alpha, N):
    a = np.longdouble(alpha)
    n = np.arange(N, dtype=np.longdouble)
    return np.sum(a / (a + n))


def test_5_G_function(verdict):
    t0 = time.perf_counter()
    g = cluster_count_G(1.0, 0.0, 3)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        alpha = float(10 ** rng.uniform(-2, 2))
        N = int(rng.integers(1, 301))
        h = 1e-4 * alpha
        # five-point stencil on an extended-precision evaluation of G
        fd = (-_G_longdouble(alpha + 2 * h, N) + 8 * _G_longdouble(alpha + h, N)
              - 8 * _G_longdouble(alpha - h, N) + _G_longdouble(alpha - 2 * h, N)) / (12 * np.longdouble(h))
        worst = max(worst, abs(dG_dalpha(alpha, N) - float(fd)))
    elapsed = time.perf_counter() - t0
    ok = abs(g - 11 / 6) <= 1e-12 and worst <= 1e-8 and elapsed < 1
    assert verdict(5, "G function", ok,
                   f"G(1,0;3)-11/6={g - 11 / 6:.1e} max|dG/dalpha - fd|={worst:.1e} time={elapsed:.2f}s")


def test_6_mean_to_median(verdict):
    t0 = time.perf_counter()
    S = 100_000
    truth = 2 * math.exp(-1) - 1
    expo = np.random.default_rng(61).exponential(size=S)
    normal = np.random.default_rng(62).standard_normal(S)
    e_val, e_se = mean_median_approx(expo, with_se=True)
    n_val, n_se = mean_median_approx(normal, with_se=True)
    gap = max(abs(loss_sensitivity(x, mean_to_median(), theta_hat=float(np.mean(x)))
                  - mean_median_approx(x)) for x in (expo, normal))
    elapsed = time.perf_counter() - t0
    ok = (abs(e_val - truth) <= 3 * e_se and abs(n_val) <= 3 * n_se and gap <= 1e-12
          and elapsed < 10)
    assert verdict(6, "mean to median", ok,
                   f"exp={e_val:.5f} (truth {truth:.5f}, se {e_se:.2g}) normal={n_val:.5f} "
                   f"(se {n_se:.2g}) path gap={gap:.1e} time={elapsed:.2f}s")


@pytest.fixture(scope="module")
def bundled_runs(tmp_path_factory):
    out = {}
    for path in sorted((ROOT / "configs").glob("*.toml")):
        runs = []
        for i in range(2):
            d = tmp_path_factory.mktemp(f"{path.stem}_{i}")
            code = run_experiment(validate_config(path), str(d))
            runs.append((code, d))
        out[path.stem] = runs
    return out


@pytest.mark.slow
def test_7_determinism(verdict, bundled_runs):
    same = {name: (a[1] / "report.json").read_bytes() == (b[1] / "report.json").read_bytes()
            for name, (a, b) in bundled_runs.items()}
    codes = {name: [c for c, _ in runs] for name, runs in bundled_runs.items()}
    ok = len(same) >= 4 and all(same.values())
    assert verdict(7, "determinism", ok,
                   " ".join(f"{k}={'identical' if v else 'DIFFERENT'}/exit{codes[k]}"
                            for k, v in same.items()))


@pytest.mark.slow
def test_7b_eb_config_is_consistent(bundled_runs):
    code, d = bundled_runs["eb_sensitivity"][0]
    assert code == 0
    report = json.loads((d / "report.json").read_text())
    assert report["targets"][0]["result"]["validation"]["verdict"] == "consistent"
    rows = (d / "validation.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].endswith(",consistent")


def test_8_weight_deletion_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    zs = []
    for case in range(20):
        N = int(rng.integers(3, 9))
        if case % 2 == 0:
            model = NormalNormalModel(sigma2=float(rng.uniform(0.5, 2)), mu0=float(rng.normal()),
                                      tau2=float(rng.uniform(0.5, 4)))
            phi = model.functionals()["mu"]
            cfg = SamplerConfig(n_draws=20_000)
        else:
            model = TruncatedDPMixtureModel(K=6, alpha=float(rng.uniform(0.5, 2)))
            phi = model.functionals(at=float(rng.normal()))["predictive_density"]
            cfg = SamplerConfig(n_draws=5000, n_burnin=200)
        data = Dataset(rng.normal(0, 3, N))
        n = int(rng.integers(0, N))
        a, a_se = refit_drop_one(model, data, None, n, cfg.replace(seed=1000 + case), phi)
        b, b_se = refit_deleted(model, data, None, n, cfg.replace(seed=2000 + case), phi)
        zs.append(compare(a, a_se, b, b_se).z_score)
    n_ok = sum(abs(z) <= 3 for z in zs)
    elapsed = time.perf_counter() - t0
    ok = n_ok == 20
    assert verdict(8, "weight/deletion equivalence", ok,
                   f"{n_ok}/20 within 3 SE, max|z|={max(map(abs, zs)):.2f} time={elapsed:.1f}s")
