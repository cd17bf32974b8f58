import itertools

import numpy as np
import pytest

from crtmed.data import SummaryConfig, Trial
from crtmed.nuisance import (
    Misspecification,
    copula_densities,
    exch_conditional,
    exch_copula_logdensity,
    fit_conditional_mediator,
    fit_copula,
    fit_eta_dagger,
    fit_eta_star,
    fit_marginal_mediator,
    fit_nuisances,
    fit_outcome_model,
    fit_propensity,
)
from crtmed.sim import FiniteDgp, LinearGaussianDgp, generate_trial, oracle_nuisances

CFG = SummaryConfig()


def linear_trial(k=200, seed=0, **kw):
    return generate_trial(LinearGaussianDgp(**kw), k, seed)


class TestOutcomeModel:
    def test_exact_linear_recovery(self):
        dgp = LinearGaussianDgp(beta0=2.0, beta_a=1.0, beta_own=1.0, beta_spill=0.0,
                                beta_v=0.0, beta_x=0.0, beta_n=0.0, sigma_y=0.0)
        trial = generate_trial(dgp, 60, seed=1)
        eta = fit_outcome_model(trial, CFG)
        rec = trial.clusters[0]
        m = np.linspace(-1, 2, rec.n)
        np.testing.assert_allclose(eta(1, m, rec), 3.0 + m, atol=1e-6)
        np.testing.assert_allclose(eta(0, m, rec), 2.0 + m, atol=1e-6)

    def test_arms_differ_by_treatment_coefficient(self):
        trial = linear_trial(k=150, seed=2)
        eta = fit_outcome_model(trial, CFG)
        rec = trial.clusters[3]
        gap = eta(1, rec.m, rec) - eta(0, rec.m, rec)
        np.testing.assert_allclose(gap, gap[0], atol=1e-10)

    def test_matches_enumerated_truth_on_discrete_dgp(self):
        dgp = FiniteDgp(sigma_y=0.1)
        trial = generate_trial(dgp, 500, seed=3)
        eta = fit_outcome_model(trial, CFG)
        worst = 0.0
        for rec in trial.clusters[:50]:
            for m in itertools.product((0.0, 1.0), repeat=rec.n):
                m = np.array(m)
                for a in (0, 1):
                    err = np.max(np.abs(eta(a, m, rec) - dgp.outcome_mean(a, m, rec)))
                    worst = max(worst, float(err))
        assert worst < 0.02


class TestMarginalMediator:
    def test_density_at_true_mode(self):
        # mediator is standard normal shifted by the arm
        dgp = LinearGaussianDgp(alpha0=0.0, alpha_a=1.0, alpha_v=0.0, alpha_x=0.0,
                                sigma_m=1.0, rho=0.0)
        trial = generate_trial(dgp, 500, seed=4)
        marginal = fit_marginal_mediator(trial, CFG)
        rec = trial.clusters[0]
        dens = marginal.pdf(1, np.ones(rec.n), rec)
        np.testing.assert_allclose(dens, 0.3989, atol=0.02)

    def test_cdf_limits_and_quantile_inverse(self):
        trial = linear_trial(k=80, seed=5)
        marginal = fit_marginal_mediator(trial, CFG)
        rec = trial.clusters[0]
        np.testing.assert_allclose(marginal.cdf(1, np.full(rec.n, -1e9), rec), 0.0, atol=1e-12)
        np.testing.assert_allclose(marginal.cdf(1, np.full(rec.n, 1e9), rec), 1.0, atol=1e-12)
        m = np.linspace(-0.5, 2.0, rec.n)
        np.testing.assert_allclose(marginal.ppf(0, marginal.cdf(0, m, rec), rec), m, atol=1e-6)

    def test_density_integrates_to_one(self):
        trial = linear_trial(k=80, seed=6)
        marginal = fit_marginal_mediator(trial, CFG)
        rec = trial.clusters[0]
        grid = np.linspace(-15, 15, 4001)
        vals = np.stack([marginal.pdf(1, np.full(rec.n, g), rec) for g in grid])
        integral = np.trapezoid(vals, grid, axis=0)
        np.testing.assert_allclose(integral, 1.0, atol=1e-3)


class TestCopula:
    def test_independent_mediators_give_small_rho(self):
        dgp = LinearGaussianDgp(size_pmf={10: 1.0}, rho=0.0)
        trial = generate_trial(dgp, 200, seed=7)
        marginal = fit_marginal_mediator(trial, CFG)
        cop = fit_copula(trial, marginal)
        assert abs(cop.rho) < 0.05

    def test_recovers_latent_correlation(self):
        dgp = LinearGaussianDgp(size_pmf={6: 1.0}, rho=0.4)
        trial = generate_trial(dgp, 300, seed=8)
        cop = fit_copula(trial, fit_marginal_mediator(trial, CFG))
        assert 0.3 < cop.rho < 0.5

    def test_singletons_contribute_nothing(self):
        dgp = LinearGaussianDgp(size_pmf={1: 0.4, 3: 0.6}, rho=0.3)
        trial = generate_trial(dgp, 200, seed=9)
        marginal = fit_marginal_mediator(trial, CFG)
        cop_full = fit_copula(trial, marginal)
        multi = Trial(
            clusters=tuple(r for r in trial.clusters if r.n > 1), pi=trial.pi
        )
        cop_multi = fit_copula(multi, marginal)
        assert cop_full.rho == pytest.approx(cop_multi.rho, abs=1e-6)

    def test_all_singletons_warns_and_returns_zero(self):
        dgp = LinearGaussianDgp(size_pmf={1: 1.0})
        trial = generate_trial(dgp, 50, seed=10)
        marginal = fit_marginal_mediator(trial, CFG)
        with pytest.warns(RuntimeWarning, match="singleton"):
            cop = fit_copula(trial, marginal)
        assert cop.rho == 0.0


class TestCopulaDensities:
    def fitted(self, rho_dgp=0.35, seed=11):
        dgp = LinearGaussianDgp(size_pmf={3: 0.6, 4: 0.4}, rho=rho_dgp)
        trial = generate_trial(dgp, 250, seed=seed)
        marginal = fit_marginal_mediator(trial, CFG)
        cop = fit_copula(trial, marginal)
        return trial, marginal, cop

    def test_independence_reduces_to_product(self):
        trial, marginal, cop = self.fitted()
        from dataclasses import replace

        cop0 = replace(cop, rho=0.0)
        joint, _, _ = copula_densities(cop0)
        rec = trial.clusters[0]
        m = np.linspace(-0.5, 2.5, rec.n)
        np.testing.assert_allclose(
            joint(1, m, rec), np.prod(marginal.pdf(1, m, rec)), rtol=1e-12
        )

    def test_chain_rule_factorization(self):
        trial, _, cop = self.fitted()
        joint, minus_j, cond_j = copula_densities(cop)
        rng = np.random.default_rng(12)
        for _ in range(100):
            rec = trial.clusters[int(rng.integers(trial.k))]
            m = rng.normal(1.0, 1.0, size=rec.n)
            j = int(rng.integers(rec.n))
            lhs = joint(1, m, rec)
            rhs = cond_j(1, m, rec, j) * minus_j(1, m, rec, j)
            assert abs(lhs - rhs) <= 1e-8 * abs(lhs)

    def test_bivariate_conditional_mean(self):
        mean, var = exch_conditional(np.array([1.0]), n=2, rho=0.5)
        assert mean == pytest.approx(0.5)
        assert var == pytest.approx(0.75)

    def test_invalid_rho_for_observed_size_rejected(self):
        trial, marginal, cop = self.fitted()
        from dataclasses import replace

        bad = replace(cop, rho=-0.6)  # invalid for n >= 3
        joint, _, _ = copula_densities(bad)
        rec = next(r for r in trial.clusters if r.n >= 3)
        with pytest.raises(ValueError, match="invalid for cluster size"):
            joint(1, rec.m, rec)

    def test_exchangeable_logdensity_matches_direct(self):
        rng = np.random.default_rng(13)
        z = rng.normal(size=(5, 4))
        rho = 0.3
        corr = np.full((4, 4), rho)
        np.fill_diagonal(corr, 1.0)
        inv = np.linalg.inv(corr)
        _, logdet = np.linalg.slogdet(corr)
        direct = -0.5 * logdet - 0.5 * (np.einsum("bi,ij,bj->b", z, inv, z) - (z**2).sum(1))
        np.testing.assert_allclose(exch_copula_logdensity(z, rho), direct, atol=1e-10)


class TestPropensity:
    def test_randomization_recovered_when_unrelated(self):
        dgp = LinearGaussianDgp(alpha_a=0.0, beta_a=0.0)  # A affects nothing
        trial = generate_trial(dgp, 500, seed=14)
        prop = fit_propensity(trial, CFG)
        preds = np.array([prop(1, rec.m, rec) for rec in trial.clusters])
        assert abs(preds.mean() - 0.5) < 0.03

    def test_arms_sum_to_one(self):
        trial = linear_trial(k=120, seed=15)
        prop = fit_propensity(trial, CFG)
        for rec in trial.clusters[:10]:
            total = prop(1, rec.m, rec) + prop(0, rec.m, rec)
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_predictions_clipped(self):
        trial = linear_trial(k=120, seed=16, alpha_a=4.0)
        prop = fit_propensity(trial, CFG, eps=0.01)
        rec = trial.clusters[0]
        p_hi = float(prop(1, np.full(rec.n, 1e3), rec))
        p_lo = float(prop(1, np.full(rec.n, -1e3), rec))
        assert sorted([p_lo, p_hi]) == pytest.approx([0.01, 0.99], abs=1e-9)


class TestEtaStar:
    def test_constant_outcome_gives_constant(self):
        dgp = LinearGaussianDgp(beta0=5.0, beta_a=0.0, beta_own=0.0, beta_spill=0.0,
                                beta_v=0.0, beta_x=0.0, beta_n=0.0, sigma_y=0.0)
        trial = generate_trial(dgp, 60, seed=17)
        eta = fit_outcome_model(trial, CFG)
        star = fit_eta_star(trial, eta, CFG)
        rec = trial.clusters[0]
        for a, a_star in ((1, 1), (1, 0), (0, 0)):
            np.testing.assert_allclose(star(a, a_star, rec), 5.0, atol=1e-8)

    def test_same_arm_matches_monte_carlo(self):
        dgp = LinearGaussianDgp(rho=0.2)
        trial = generate_trial(dgp, 300, seed=18)
        ns = fit_nuisances(trial, CFG, needs=("eif1", "eif2"))
        from crtmed.integrate import sample_mediators

        rec = trial.clusters[0]
        for a in (0, 1):
            draws = sample_mediators(ns, a, rec, count=10**5, seed=99)
            mc = ns.eta(a, draws, rec).mean(axis=0)
            np.testing.assert_allclose(ns.eta_star(a, a, rec), mc, atol=0.02)

    def test_linear_in_cluster_covariate(self):
        trial = linear_trial(k=250, seed=19)
        eta = fit_outcome_model(trial, CFG)
        star = fit_eta_star(trial, eta, CFG)
        from dataclasses import replace

        rec = trial.clusters[0]
        vals = []
        for v in (-1.0, 0.0, 1.0):
            rec_v = replace(rec, v=np.array([v]))
            vals.append(star(1, 0, rec_v)[0])
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-6)


class TestEtaDagger:
    def test_singleton_clusters_reduce_to_outcome_regression(self):
        dgp = LinearGaussianDgp(size_pmf={1: 1.0}, beta_spill=0.0)
        trial = generate_trial(dgp, 150, seed=20)
        eta = fit_outcome_model(trial, CFG)
        marginal = fit_marginal_mediator(trial, CFG)
        dag = fit_eta_dagger(trial, eta, marginal, None, CFG, pairs=((1, 1), (1, 0)))
        rec = trial.clusters[0]
        for mj in (-0.5, 0.8, 2.0):
            direct = eta(1, np.array([mj]), rec)[0]
            assert dag(1, 1, np.array([mj]), rec, 0)[0] == pytest.approx(direct, abs=1e-6)

    def test_same_arm_independent_matches_mc(self):
        # with matched own-given-rest and marginal densities the density
        # ratio cancels, and the fit reduces to regressing the outcome model
        # on the own mediator and covariates
        dgp = LinearGaussianDgp(rho=0.0)
        trial = generate_trial(dgp, 400, seed=21)
        eta = fit_outcome_model(trial, CFG)
        marginal = fit_marginal_mediator(trial, CFG)
        dag = fit_eta_dagger(trial, eta, marginal, None, CFG, pairs=((1, 1),))
        ns = fit_nuisances(trial, CFG, eta_dagger_pairs=((1, 1),))
        rec = next(r for r in trial.clusters if r.n >= 3)
        from crtmed.integrate import sample_mediators

        mj = float(rec.m[0])
        m = sample_mediators(ns, 1, rec, count=10**5, seed=123)
        m[:, 0] = mj
        mc = float(ns.eta(1, m, rec)[:, 0].mean())
        assert float(dag(1, 1, np.array([mj]), rec, 0)[0]) == pytest.approx(mc, abs=0.03)

    def test_constant_outcome_with_matched_densities_gives_constant(self):
        dgp = LinearGaussianDgp(beta0=3.0, beta_a=0.0, beta_own=0.0, beta_spill=0.0,
                                beta_v=0.0, beta_x=0.0, beta_n=0.0, sigma_y=0.0, rho=0.0)
        trial = generate_trial(dgp, 100, seed=22)
        eta = fit_outcome_model(trial, CFG)
        marginal = fit_marginal_mediator(trial, CFG)
        dag = fit_eta_dagger(trial, eta, marginal, None, CFG, pairs=((1, 0),))
        rec = trial.clusters[0]
        np.testing.assert_allclose(
            dag(1, 0, np.array([0.0, 1.0]), rec, 0), 3.0, atol=1e-6
        )
        oracle = oracle_nuisances(dgp)
        np.testing.assert_allclose(
            oracle.eta_dagger(1, 0, np.array([0.0, 1.0]), rec, 0), 3.0, atol=1e-12
        )


class TestNuisanceSet:
    def test_available_members(self):
        trial = linear_trial(k=100, seed=23)
        ns = fit_nuisances(trial, CFG, needs=("eif1",))
        assert "eta" in ns.available and "kappa_joint" in ns.available
        assert ns.eta_star is None
        with pytest.raises(ValueError, match="missing"):
            ns.require("eta_star")

    def test_misspecified_outcome_ignores_mediator(self):
        trial = linear_trial(k=100, seed=24)
        ns = fit_nuisances(trial, CFG, misspec=Misspecification(outcome_omit_mediator=True))
        rec = trial.clusters[0]
        a_val = ns.eta(1, rec.m, rec)
        b_val = ns.eta(1, rec.m + 5.0, rec)
        np.testing.assert_allclose(a_val, b_val, atol=1e-12)

    def test_force_rho_overrides_fit(self):
        trial = linear_trial(k=100, seed=25)
        ns = fit_nuisances(trial, CFG, misspec=Misspecification(force_rho=0.4))
        assert ns.rho == pytest.approx(0.4)

    def test_oracle_matches_fitted_shapes(self):
        dgp = LinearGaussianDgp(rho=0.25)
        trial = generate_trial(dgp, 50, seed=26)
        ns = oracle_nuisances(dgp)
        rec = trial.clusters[0]
        assert ns.eta(1, rec.m, rec).shape == (rec.n,)
        assert np.isscalar(float(ns.kappa_joint(1, rec.m, rec)))
        total = ns.propensity(1, rec.m, rec) + ns.propensity(0, rec.m, rec)
        assert float(total) == pytest.approx(1.0, abs=1e-12)

    def test_conditional_model_falls_back_for_singletons(self):
        dgp = LinearGaussianDgp(size_pmf={1: 0.5, 3: 0.5}, rho=0.0)
        trial = generate_trial(dgp, 200, seed=27)
        marginal = fit_marginal_mediator(trial, CFG)
        cond = fit_conditional_mediator(trial, CFG, marginal)
        rec = next(r for r in trial.clusters if r.n == 1)
        np.testing.assert_allclose(
            cond.pdf(1, rec.m, rec, 0), marginal.pdf(1, rec.m, rec)[0], rtol=1e-12
        )
