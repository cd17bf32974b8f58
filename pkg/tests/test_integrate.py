import dataclasses

import numpy as np
import pytest

from crtmed.integrate import AuxEvaluator, IntegrationPlan, sample_mediators
from crtmed.sim import FiniteDgp, LinearGaussianDgp, generate_trial, oracle_nuisances

PLAN = IntegrationPlan(draws=4000, seed=0)


def linear_setup(rho=0.0, k=20, seed=0, **kw):
    dgp = LinearGaussianDgp(rho=rho, **kw)
    trial = generate_trial(dgp, k, seed)
    return dgp, trial, oracle_nuisances(dgp)


def finite_setup(seed=0, k=20, **kw):
    dgp = FiniteDgp(**kw)
    trial = generate_trial(dgp, k, seed)
    return dgp, trial, oracle_nuisances(dgp)


class TestIntegrationPlan:
    def test_validation(self):
        with pytest.raises(ValueError, match="1000"):
            IntegrationPlan(draws=10)
        with pytest.raises(ValueError, match="16"):
            IntegrationPlan(nodes=4)
        with pytest.raises(ValueError, match="unknown"):
            IntegrationPlan(method="magic")

    def test_enumeration_needs_finite_support(self):
        _, _, ns = linear_setup()
        with pytest.raises(ValueError, match="finite"):
            AuxEvaluator(ns, IntegrationPlan(method="enumerate"), pi=0.5)


class TestSampleMediators:
    def test_independent_coordinates(self):
        dgp, trial, ns = linear_setup(rho=0.0, size_pmf={4: 1.0})
        rec = trial.clusters[0]
        draws = sample_mediators(ns, 1, rec, count=10**5, seed=1)
        corr = np.corrcoef(draws.T)
        off = corr[~np.eye(4, dtype=bool)]
        assert np.all(np.abs(off) < 0.05)

    def test_latent_correlation_recovered(self):
        dgp, trial, ns = linear_setup(rho=0.6, size_pmf={4: 1.0}, alpha_x=0.0,
                                      alpha_v=0.0)
        rec = trial.clusters[0]
        draws = sample_mediators(ns, 1, rec, count=10**5, seed=2)
        z = (draws - ns.kappa_j_latent(1, np.zeros(4), rec)) / dgp.sigma_m
        corr = np.corrcoef(z.T)
        off = corr[~np.eye(4, dtype=bool)]
        np.testing.assert_allclose(off, 0.6, atol=0.02)

    def test_marginal_means_match(self):
        dgp, trial, ns = linear_setup(rho=0.3)
        rec = trial.clusters[0]
        count = 10**5
        draws = sample_mediators(ns, 1, rec, count=count, seed=3)
        target = dgp.mediator_mean(1, rec)
        se = dgp.sigma_m / np.sqrt(count)
        assert np.all(np.abs(draws.mean(axis=0) - target) < 3 * se)

    def test_deterministic_given_seed(self):
        _, trial, ns = linear_setup()
        rec = trial.clusters[0]
        a = sample_mediators(ns, 1, rec, count=2000, seed=9)
        b = sample_mediators(ns, 1, rec, count=2000, seed=9)
        np.testing.assert_array_equal(a, b)


class TestUFunctions:
    def test_constant_outcome_constant_integrals(self):
        _, trial, ns = linear_setup(beta0=4.0, beta_a=0.0, beta_own=0.0,
                                    beta_spill=0.0, beta_v=0.0, beta_x=0.0,
                                    beta_n=0.0, sigma_y=0.0)
        aux = AuxEvaluator(ns, PLAN, pi=0.5)
        rec = trial.clusters[0]
        np.testing.assert_allclose(aux.u1(1, 0, rec), 4.0, atol=1e-12)
        np.testing.assert_allclose(aux.u2(1, 0, rec.m[0], rec, 0), 4.0, atol=1e-12)
        others = rec.m[1:] if rec.n > 1 else np.zeros(0)
        assert aux.u3(1, 1, others, rec, 0) == pytest.approx(4.0, abs=1e-9)
        np.testing.assert_allclose(aux.u4(1, 1, 0, rec), 4.0, atol=1e-12)

    def test_finite_enumeration_matches_manual_mc(self):
        dgp, trial, ns = finite_setup(k=10)
        rec = next(r for r in trial.clusters if r.n >= 2)
        aux = AuxEvaluator(ns, IntegrationPlan(method="enumerate"), pi=0.5)
        exact = aux.u4(1, 1, 0, rec)
        # manual Monte Carlo: own mediator from the treated marginal law,
        # the rest from the control joint law
        rng = np.random.default_rng(5)
        count = 200_000
        own = ns.kappa_j_ppf(1, rng.random((count, rec.n)), rec)
        others = ns.kappa_j_ppf(0, rng.random((count, rec.n)), rec)
        # mixture dependence: redraw others jointly via the latent class
        qs = list(dgp.mix_pmf.items())
        u_class = rng.choice([u for u, _ in qs], p=[q for _, q in qs], size=count)
        p0 = np.array([dgp.prob_m1(0, dgp._v_of(rec), u) for u in u_class])
        others = (rng.random((count, rec.n)) < p0[:, None]).astype(float)
        for j in range(rec.n):
            mm = others.copy()
            mm[:, j] = own[:, j]
            vals = ns.eta(1, mm, rec)[:, j]
            mc, se = vals.mean(), vals.std(ddof=1) / np.sqrt(count)
            assert abs(mc - exact[j]) < 3 * se + 1e-12

    def test_u4_equals_u1_under_independence_same_arm(self):
        dgp, trial, ns = finite_setup(mix_pmf={0: 1.0})
        aux = AuxEvaluator(ns, IntegrationPlan(method="enumerate"), pi=0.5)
        rec = next(r for r in trial.clusters if r.n >= 2)
        np.testing.assert_allclose(aux.u4(1, 1, 1, rec), aux.u1(1, 1, rec), atol=1e-12)

    def test_u_functions_invariant_to_permuting_others(self):
        _, trial, ns = finite_setup()
        aux = AuxEvaluator(ns, IntegrationPlan(method="enumerate"), pi=0.5)
        rec = next(r for r in trial.clusters if r.n == 3)
        a_val = aux.u3(1, 1, np.array([0.0, 1.0]), rec, 0)
        b_val = aux.u3(1, 1, np.array([1.0, 0.0]), rec, 0)
        assert a_val == pytest.approx(b_val, abs=1e-12)

    def test_missing_nuisance_named(self):
        dgp, trial, ns = linear_setup()
        gutted = dataclasses.replace(ns, eta_dagger=None)
        with pytest.raises(ValueError, match="eta_dagger"):
            AuxEvaluator(gutted, PLAN, parameterization="eif2", pi=0.5)


class TestWeights:
    def test_w1_identity_same_arm(self):
        for param in ("eif1", "eif2"):
            _, trial, ns = linear_setup(rho=0.2)
            aux = AuxEvaluator(ns, PLAN, parameterization=param, pi=0.5)
            for rec in trial.clusters[:5]:
                for a in (0, 1):
                    assert float(aux.w1(a, a, rec.m, rec)) == 1.0

    def test_w1_parameterizations_agree_at_truth(self):
        _, trial, ns = linear_setup(rho=0.25)
        a1 = AuxEvaluator(ns, PLAN, parameterization="eif1", pi=0.5)
        a2 = AuxEvaluator(ns, PLAN, parameterization="eif2", pi=0.5)
        for rec in trial.clusters[:10]:
            np.testing.assert_allclose(
                a1.w1(1, 0, rec.m, rec), a2.w1(1, 0, rec.m, rec), rtol=1e-8
            )

    def test_w2_parameterizations_agree_on_finite_support(self):
        import itertools

        _, trial, ns = finite_setup()
        a1 = AuxEvaluator(ns, IntegrationPlan(method="enumerate"), parameterization="eif1", pi=0.5)
        a2 = AuxEvaluator(ns, IntegrationPlan(method="enumerate"), parameterization="eif2", pi=0.5)
        rec = next(r for r in trial.clusters if r.n >= 2)
        for m in itertools.product((0.0, 1.0), repeat=rec.n):
            m = np.array(m)
            np.testing.assert_allclose(
                a1.w2(1, 0, 1, m, rec), a2.w2(1, 0, 1, m, rec), atol=1e-10
            )

    def test_w2_integrates_to_one(self):
        # a gentle arm shift keeps the density-ratio tail light enough for a
        # 20k-draw check; clipping is disabled so the mean is not truncated
        _, trial, ns = linear_setup(rho=0.3, alpha_a=0.3)
        aux = AuxEvaluator(ns, PLAN, pi=0.5, w_max=1e9)
        rec = next(r for r in trial.clusters if r.n >= 3)
        draws = sample_mediators(ns, 1, rec, count=20000, seed=4)
        w = aux.w2(1, 0, 1, draws, rec)
        np.testing.assert_allclose(w.mean(axis=0), 1.0, atol=0.02)

    def test_weights_clipped_and_counted(self):
        _, trial, ns = linear_setup(rho=0.0, alpha_a=6.0)
        aux = AuxEvaluator(ns, PLAN, pi=0.5, w_max=50.0)
        rec = next(r for r in trial.clusters if r.a == 1)
        val = aux.w1(0, 1, rec.m, rec)  # treated draw evaluated as if control
        assert float(val) <= 50.0
        assert aux.clip_events >= 1


class TestAccuracy:
    def test_mc_error_shrinks_at_root_rate(self):
        # antithetic pairs integrate linear outcomes exactly, so a curved
        # outcome surface is needed to expose the Monte Carlo error rate
        _, trial, ns = linear_setup(rho=0.2)
        curved = dataclasses.replace(
            ns, eta=lambda a, m, rec: np.exp(0.3 * np.asarray(m)) + a
        )
        rec = next(r for r in trial.clusters if r.n >= 3)
        draw_counts = (1000, 4000, 16000)
        ses = []
        for draws in draw_counts:
            vals = []
            for seed in range(40):
                plan = IntegrationPlan(draws=draws, seed=seed)
                aux = AuxEvaluator(curved, plan, pi=0.5)
                vals.append(aux.u1(1, 0, rec)[0])
            ses.append(np.std(vals, ddof=1))
        slope = np.polyfit(np.log(draw_counts), np.log(ses), 1)[0]
        assert -0.65 < slope < -0.35

    def test_quadrature_node_doubling_stable(self):
        _, trial, ns = linear_setup(rho=0.2)
        smooth = dataclasses.replace(
            ns, eta=lambda a, m, rec: np.sin(np.asarray(m)) + 0.1 * np.asarray(m) ** 2
        )
        rec = next(r for r in trial.clusters if r.n >= 2)
        others = rec.m[1:]
        res = {}
        for nodes in (64, 128):
            aux = AuxEvaluator(smooth, IntegrationPlan(nodes=nodes, seed=0), pi=0.5)
            res[nodes] = aux.u3(1, 1, others, rec, 0)
        assert abs(res[64] - res[128]) < 1e-6

    def test_antithetic_draws_are_paired(self):
        _, trial, ns = linear_setup()
        rec = trial.clusters[0]
        aux = AuxEvaluator(ns, IntegrationPlan(draws=2000, seed=7, antithetic=True), pi=0.5)
        z, own = aux._latents(rec)
        np.testing.assert_allclose(z[:1000], -z[1000:], atol=1e-12)
        np.testing.assert_allclose(own[:1000], -own[1000:], atol=1e-12)
