from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnpsens.empirical_bayes import (
    CLUSTER_COUNT,
    EBSolverConfig,
    cluster_count_G,
    dG_dalpha,
    dG_dm,
    eb_sensitivity,
    solve_eb,
)
from bnpsens.errors import (
    BracketError,
    DomainError,
    NoisyObjectiveError,
    NonIdentifiedError,
    SingularityError,
)
from bnpsens.models import Dataset, Functional, TruncatedDPMixtureModel
from bnpsens.sampler import SamplerConfig, gibbs_dp_mixture
from bnpsens.sensitivity import hyper_score, posterior_cov


def three_clusters(seed=7, per=10):
    rng = np.random.default_rng(seed)
    return Dataset(np.concatenate([c + rng.standard_normal(per) for c in (-6.0, 0.0, 6.0)]))


# ---- G and its derivatives ---------------------------------------------------

def test_G_single_point():
    for alpha in (0.01, 1.0, 300.0):
        assert cluster_count_G(alpha, 0.4, 1) == pytest.approx(0.6, abs=1e-15)


def test_G_three_points():
    assert cluster_count_G(1.0, 0.0, 3) == pytest.approx(11 / 6, abs=1e-12)
    assert cluster_count_G(1.0, 1.5, 3) == pytest.approx(11 / 6 - 1.5, abs=1e-12)


def test_G_large_alpha_approaches_zero_from_below():
    exact = Fraction(0)
    a = Fraction(10**6)
    for n in range(3):
        exact += a / (a + n)
    exact -= 3
    got = cluster_count_G(1e6, 3.0, 3)
    assert got < 0
    assert got == pytest.approx(float(exact), rel=1e-6)
    assert got == pytest.approx(-2.999995e-06, rel=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1.001, 3.0), st.integers(2, 200), st.floats(0, 10))
def test_G_strictly_increasing(alpha, factor, N, m):
    assert cluster_count_G(alpha * factor, m, N) > cluster_count_G(alpha, m, N)


def test_G_limits():
    assert cluster_count_G(1e-12, 0.0, 10) == pytest.approx(1.0, abs=1e-9)
    assert cluster_count_G(1e12, 0.0, 10) == pytest.approx(10.0, abs=1e-9)


def test_G_domain():
    with pytest.raises(DomainError):
        cluster_count_G(0.0, 1.0, 3)
    with pytest.raises(DomainError):
        dG_dalpha(-1.0, 3)


def test_dG_dalpha_examples():
    assert dG_dalpha(3.7, 1) == 0.0
    assert dG_dalpha(1.0, 2) == pytest.approx(0.25, abs=1e-15)
    h = 1e-6
    fd = (cluster_count_G(1 + h, 0, 2) - cluster_count_G(1 - h, 0, 2)) / (2 * h)
    assert fd == pytest.approx(0.25, abs=1e-8)
    assert dG_dm() == -1.0


# ---- solver ------------------------------------------------------------------

def test_solve_eb_single_cluster_drives_alpha_to_zero():
    model = TruncatedDPMixtureModel(K=10, obs_var=0.01, comp_prior_var=25.0)
    sol = solve_eb(model, Dataset([1.0] * 5), None, SamplerConfig(n_draws=2000, n_burnin=100, seed=1))
    assert sol.alpha_hat < 0.05
    assert sol.residual <= 0.05


def test_solve_eb_root_is_consistent_with_G():
    data = three_clusters()
    model = TruncatedDPMixtureModel(K=20, alpha=1.0)
    cfg = SamplerConfig(n_draws=5000, n_burnin=500, seed=11)
    sol = solve_eb(model, data, None, cfg)
    assert sol.residual <= 0.05
    assert cluster_count_G(sol.alpha_hat, sol.m_hat, data.N) == pytest.approx(0.0, abs=0.05)
    assert sol.bracket[0] <= sol.alpha_hat <= sol.bracket[1]
    assert sol.bracket[1] / sol.bracket[0] - 1 <= 1e-3
    # the same seed reproduces the fit exactly
    assert solve_eb(model, data, None, cfg).alpha_hat == sol.alpha_hat


def test_solve_eb_one_point_not_identified():
    with pytest.raises(NonIdentifiedError):
        solve_eb(TruncatedDPMixtureModel(K=5), Dataset([0.3]), None, SamplerConfig(n_draws=100))


def test_solve_eb_bracket_without_root():
    with pytest.raises(BracketError, match="empirical_bayes.bracket"):
        solve_eb(TruncatedDPMixtureModel(K=10), three_clusters(), None,
                 SamplerConfig(n_draws=300, n_burnin=50),
                 EBSolverConfig(bracket=(100.0, 1000.0)))
    with pytest.raises(BracketError, match="empirical_bayes.bracket"):
        EBSolverConfig(bracket=(2.0, 1.0))


def test_solve_eb_noisy_objective():
    with pytest.raises(NoisyObjectiveError, match="n_draws"):
        solve_eb(TruncatedDPMixtureModel(K=10), three_clusters(), None,
                 SamplerConfig(n_draws=100, n_burnin=20, seed=3),
                 EBSolverConfig(tol=1e-9, common_random_numbers=False))


def test_solve_eb_rejects_dependent_prior():
    from bnpsens.models import DependentStickPrior
    with pytest.raises(DomainError):
        solve_eb(TruncatedDPMixtureModel(K=5, stick_prior=DependentStickPrior()),
                 Dataset([0.0, 1.0]), None, SamplerConfig(n_draws=100))


# ---- eb_sensitivity ----------------------------------------------------------

@pytest.fixture(scope="module")
def eb_chain():
    data = three_clusters()
    model = TruncatedDPMixtureModel(K=20, alpha=1.6)
    chain = gibbs_dp_mixture(model, data, None, SamplerConfig(n_draws=5000, n_burnin=300, seed=2))
    return model, data, chain


def test_eb_breakdown_identity_and_recomputation(eb_chain):
    model, data, chain = eb_chain
    phi = model.functionals(at=-6.0)["predictive_density"]
    br = eb_sensitivity(chain, phi, CLUSTER_COUNT, model, data, None, "w[0]")
    assert abs(br.total - (br.direct_term + br.indirect_term)) <= 1e-12

    # recompute the implicit-function term by hand
    s_a = hyper_score(chain, model, data, "alpha")
    s_w = hyper_score(chain, model, data, "w[0]")
    Fv = chain.evaluate(CLUSTER_COUNT)
    total_deriv = dG_dalpha(1.6, data.N) - np.cov(Fv, s_a)[0, 1]
    dadw = np.cov(Fv, s_w)[0, 1] / total_deriv
    assert br.dalpha_domega == pytest.approx(dadw, rel=1e-9)
    direct = np.cov(chain.evaluate(phi), s_w)[0, 1]
    indirect = np.cov(chain.evaluate(phi), s_a)[0, 1] * dadw
    assert br.direct_term == pytest.approx(direct, rel=1e-9)
    assert br.indirect_term == pytest.approx(indirect, rel=1e-9)
    assert br.alpha_hat == 1.6 and br.dG_dm == -1.0


def test_eb_constant_phi(eb_chain):
    model, data, chain = eb_chain
    const = Functional("c", lambda b: np.ones(b["sticks"].shape[0]))
    br = eb_sensitivity(chain, const, CLUSTER_COUNT, model, data, None, "w[3]")
    assert br.total == 0.0 and br.direct_term == 0.0 and br.indirect_term == 0.0


def test_eb_prior_mean_omega(eb_chain):
    model, data, chain = eb_chain
    phi = model.functionals(at=0.0)["predictive_density"]
    br = eb_sensitivity(chain, phi, CLUSTER_COUNT, model, data, None, "comp_prior_mean")
    direct = posterior_cov(chain, phi, hyper_score(chain, model, data, "comp_prior_mean"))
    assert br.direct_term == pytest.approx(direct.value, rel=1e-12)


def test_eb_errors(eb_chain):
    model, data, chain = eb_chain
    phi = model.functionals()["first_stick"]
    with pytest.raises(SingularityError):
        eb_sensitivity(chain, phi, CLUSTER_COUNT, model, data, None, "w[0]", singular_tol=1e6)
    with pytest.raises(DomainError):
        eb_sensitivity(chain, phi, CLUSTER_COUNT, model, data, None, "alpha")
