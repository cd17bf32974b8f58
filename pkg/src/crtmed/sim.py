"""Data-generating processes, brute-force oracles, and the scenario runner.

Two built-in DGP families cover the testing needs:

* :class:`LinearGaussianDgp` draws exchangeable latent-normal mediators and a
  linear outcome. Its estimands have an exact closed form (everything is
  linear), plus a Monte Carlo oracle for cross-checking.
* :class:`FiniteDgp` draws a binary mediator from a finite mixture over a
  latent cluster class, which makes every density a finite exact sum. Its
  estimands are computed by full enumeration, and its exact nuisance
  functions can be injected into the estimators to isolate their algebra.

Both expose ``oracle_nuisances`` so estimator tests can run with the truth
plugged in, and ``run_scenario`` aggregates bias, spread, reported standard
errors and interval coverage across replicates.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .data import ClusterRecord, EffectScale, SummaryConfig, Trial
from .estimators import (
    EFFECTS,
    EstimateResult,
    EstimatorSpec,
    assemble_effects,
    estimate,
)
from .inference import InferenceSpec, estimate_with_intervals
from .nuisance import (
    CopulaModel,
    Misspecification,
    NuisanceSet,
    copula_densities,
    exch_cholesky,
)

__all__ = [
    "LinearGaussianDgp",
    "FiniteDgp",
    "OracleTruth",
    "ScenarioResult",
    "generate_trial",
    "oracle_truth",
    "oracle_effects",
    "oracle_nuisances",
    "exact_proportions_trial",
    "run_scenario",
    "rps_like_dgp",
]


def _normalize_pmf(pmf: Mapping) -> dict:
    total = float(sum(pmf.values()))
    if not math.isclose(total, 1.0, abs_tol=1e-9):
        raise ValueError(f"probabilities must sum to 1, got {total}")
    return {k: float(v) for k, v in pmf.items()}


@dataclass(frozen=True)
class OracleTruth:
    """True estimand values for a DGP, with the method used to obtain them."""

    theta_c: dict
    theta_i: dict
    tau_c: float
    tau_i: float
    method: str
    se: float | None = None


def oracle_effects(truth: OracleTruth, scale: EffectScale) -> dict[str, float]:
    """Effect decomposition of the oracle, mirroring the estimator output keys."""
    out = {}
    for weighting in ("c", "i"):
        theta = truth.theta_c if weighting == "c" else truth.theta_i
        tau = truth.tau_c if weighting == "c" else truth.tau_i
        sme = scale.g(theta[(1, 1)], tau)
        ime = scale.g(tau, theta[(1, 0)])
        nde = scale.g(theta[(1, 0)], theta[(0, 0)])
        nie = sme + ime if scale.kind == "difference" else sme * ime
        te = nie + nde if scale.kind == "difference" else nie * nde
        out[f"sme_{weighting}"] = sme
        out[f"ime_{weighting}"] = ime
        out[f"nde_{weighting}"] = nde
        out[f"nie_{weighting}"] = nie
        out[f"te_{weighting}"] = te
    return out


# ----------------------------------------------------------------------------
# Linear-gaussian DGP.
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianDgp:
    """Continuous-mediator DGP: exchangeable latent-normal mediators, linear outcome.

    Cluster covariate V and individual covariates X are standard normal. The
    mediator mean is linear in (arm, V, X, centered size) with homoscedastic
    noise and exchangeable latent correlation ``rho``; the outcome mean is
    linear in (arm, own mediator, leave-one-out mediator mean, V, X, centered
    size). A nonzero ``beta_n`` (or ``alpha_n``) makes cluster size
    informative, separating the cluster- and individual-average estimands.
    """

    size_pmf: Mapping[int, float] = field(
        default_factory=lambda: {2: 0.5, 3: 0.3, 4: 0.2}
    )
    pi: float = 0.5
    alpha0: float = 0.5
    alpha_a: float = 1.0
    alpha_v: float = 0.4
    alpha_x: float = 0.3
    alpha_n: float = 0.0
    sigma_m: float = 0.8
    rho: float = 0.0
    beta0: float = 1.0
    beta_a: float = 0.8
    beta_own: float = 1.2
    beta_spill: float = 0.9
    beta_v: float = 0.5
    beta_x: float = 0.4
    beta_n: float = 0.3
    sigma_y: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "size_pmf", _normalize_pmf(self.size_pmf))

    @property
    def mean_size(self) -> float:
        return float(sum(n * p for n, p in self.size_pmf.items()))

    def _nc(self, n) -> np.ndarray:
        return np.asarray(n, dtype=float) - self.mean_size

    def mediator_mean(self, a, rec: ClusterRecord) -> np.ndarray:
        v = rec.v[0] if rec.d_v else 0.0
        x = rec.x[:, 0] if rec.d_x else np.zeros(rec.n)
        return (
            self.alpha0
            + self.alpha_a * a
            + self.alpha_v * v
            + self.alpha_x * x
            + self.alpha_n * self._nc(rec.n)
        )

    def outcome_mean(self, a, m, rec: ClusterRecord) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        v = rec.v[0] if rec.d_v else 0.0
        x = rec.x[:, 0] if rec.d_x else np.zeros(rec.n)
        if rec.n == 1:
            loo = np.zeros_like(m)
        else:
            loo = (m.sum(axis=-1, keepdims=True) - m) / (rec.n - 1)
        return (
            self.beta0
            + self.beta_a * a
            + self.beta_own * m
            + self.beta_spill * loo
            + self.beta_v * v
            + self.beta_x * x
            + self.beta_n * self._nc(rec.n)
        )

    def generate(self, k: int, seed: int) -> Trial:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
        sizes = list(self.size_pmf)
        probs = np.array([self.size_pmf[n] for n in sizes])
        chols = {n: exch_cholesky(n, self.rho) for n in sizes}
        clusters = []
        for i in range(k):
            n = int(rng.choice(sizes, p=probs))
            v = rng.standard_normal(1)
            x = rng.standard_normal((n, 1))
            a = int(rng.random() < self.pi)
            rec0 = ClusterRecord(
                id=f"c{i:05d}", n=n, v=v, x=x, a=a, m=np.zeros(n), y=np.zeros(n)
            )
            z = rng.standard_normal(n) @ chols[n].T if n > 1 else rng.standard_normal(1)
            m = self.mediator_mean(a, rec0) + self.sigma_m * z
            y = self.outcome_mean(a, m, rec0) + self.sigma_y * rng.standard_normal(n)
            clusters.append(replace(rec0, m=m, y=y))
        return Trial(clusters=tuple(clusters), pi=self.pi)

    def oracle(self) -> OracleTruth:
        """Exact estimands: covariates have mean zero, so only size enters the averages."""
        theta_c = {}
        theta_i = {}
        tau_c = tau_i = 0.0
        en = self.mean_size
        for (a, a_star) in ((1, 1), (1, 0), (0, 0)):
            vals_c = vals_i = 0.0
            for n, p in self.size_pmf.items():
                mu = self.alpha0 + self.alpha_a * a_star + self.alpha_n * (n - en)
                spill = self.beta_spill * mu if n > 1 else 0.0
                val = (
                    self.beta0
                    + self.beta_a * a
                    + self.beta_n * (n - en)
                    + self.beta_own * mu
                    + spill
                )
                vals_c += p * val
                vals_i += (n * p / en) * val
            theta_c[(a, a_star)] = vals_c
            theta_i[(a, a_star)] = vals_i
        for n, p in self.size_pmf.items():
            mu1 = self.alpha0 + self.alpha_a + self.alpha_n * (n - en)
            mu0 = self.alpha0 + self.alpha_n * (n - en)
            spill = self.beta_spill * mu0 if n > 1 else 0.0
            val = (
                self.beta0
                + self.beta_a
                + self.beta_n * (n - en)
                + self.beta_own * mu1
                + spill
            )
            tau_c += p * val
            tau_i += (n * p / en) * val
        return OracleTruth(theta_c, theta_i, tau_c, tau_i, method="closed_form")

    def oracle_mc(self, draws: int = 10**6, seed: int = 0, tol: float | None = None) -> OracleTruth:
        """Monte Carlo oracle over cluster draws, evaluating true conditional means."""
        rng = np.random.default_rng(seed)
        sizes = list(self.size_pmf)
        probs = np.array([self.size_pmf[n] for n in sizes])
        n_draw = rng.choice(sizes, p=probs, size=draws)
        contributions = {c: np.empty(draws) for c in ((1, 1), (1, 0), (0, 0), "tau")}
        weights = np.empty(draws)
        en = self.mean_size
        for n in sizes:
            mask = n_draw == n
            cnt = int(mask.sum())
            if cnt == 0:
                continue
            v = rng.standard_normal(cnt)
            x = rng.standard_normal((cnt, n))
            mu = {
                arm: self.alpha0
                + self.alpha_a * arm
                + self.alpha_v * v[:, None]
                + self.alpha_x * x
                + self.alpha_n * (n - en)
                for arm in (0, 1)
            }
            base = (
                self.beta_v * v[:, None]
                + self.beta_x * x
                + self.beta_n * (n - en)
                + self.beta0
            )
            loo = {
                arm: (mu[arm].sum(axis=1, keepdims=True) - mu[arm]) / (n - 1)
                if n > 1
                else np.zeros_like(mu[arm])
                for arm in (0, 1)
            }
            for (a, a_star) in ((1, 1), (1, 0), (0, 0)):
                vals = base + self.beta_a * a + self.beta_own * mu[a_star] + self.beta_spill * loo[a_star]
                contributions[(a, a_star)][mask] = vals.mean(axis=1)
            vals = base + self.beta_a + self.beta_own * mu[1] + self.beta_spill * loo[0]
            contributions["tau"][mask] = vals.mean(axis=1)
            weights[mask] = n
        wbar = weights.mean()
        theta_c, theta_i, ses = {}, {}, []
        for c in ((1, 1), (1, 0), (0, 0)):
            theta_c[c] = float(contributions[c].mean())
            theta_i[c] = float((weights * contributions[c]).mean() / wbar)
            ses.append(contributions[c].std(ddof=1) / math.sqrt(draws))
        tau_c = float(contributions["tau"].mean())
        tau_i = float((weights * contributions["tau"]).mean() / wbar)
        ses.append(contributions["tau"].std(ddof=1) / math.sqrt(draws))
        se = float(max(ses))
        if tol is not None and se > tol:
            raise ValueError(
                f"Monte Carlo oracle standard error {se:.2e} exceeds tolerance {tol:.2e}; "
                "increase the number of draws"
            )
        return OracleTruth(theta_c, theta_i, tau_c, tau_i, method="mc", se=se)


class _OracleGaussianMarginal:
    """Exact marginal mediator law of a linear-gaussian DGP (duck-typed marginal)."""

    def __init__(self, dgp: LinearGaussianDgp):
        self.dgp = dgp
        self.sigma = dgp.sigma_m

    def mean(self, a, rec):
        return self.dgp.mediator_mean(a, rec)

    def pdf(self, a, m, rec):
        z = (np.asarray(m, dtype=float) - self.mean(a, rec)) / self.sigma
        return np.exp(-0.5 * z**2) / (self.sigma * math.sqrt(2 * math.pi))

    def cdf(self, a, m, rec):
        return ndtr((np.asarray(m, dtype=float) - self.mean(a, rec)) / self.sigma)

    def ppf(self, a, u, rec):
        u = np.clip(np.asarray(u, dtype=float), 1e-12, 1 - 1e-12)
        return self.mean(a, rec) + self.sigma * ndtri(u)

    def from_latent(self, a, z, rec):
        return self.mean(a, rec) + self.sigma * np.asarray(z, dtype=float)


def _linear_oracle_nuisances(dgp: LinearGaussianDgp) -> NuisanceSet:
    marginal = _OracleGaussianMarginal(dgp)
    cop = CopulaModel(rho=dgp.rho, marginal=marginal, n_max=max(dgp.size_pmf))
    joint, minus_j, cond_j = copula_densities(cop)
    en = dgp.mean_size

    def eta(a, m, rec):
        return dgp.outcome_mean(a, m, rec)

    def propensity(a, m, rec):
        k1 = joint(1, m, rec)
        k0 = joint(0, m, rec)
        p1 = dgp.pi * k1 / (dgp.pi * k1 + (1 - dgp.pi) * k0)
        return p1 if a == 1 else 1.0 - p1

    def eta_star(a, a_star, rec):
        mu = dgp.mediator_mean(a_star, rec)
        if rec.n == 1:
            loo = np.zeros(1)
        else:
            loo = (mu.sum() - mu) / (rec.n - 1)
        v = rec.v[0] if rec.d_v else 0.0
        x = rec.x[:, 0] if rec.d_x else np.zeros(rec.n)
        return (
            dgp.beta0
            + dgp.beta_a * a
            + dgp.beta_own * mu
            + dgp.beta_spill * loo
            + dgp.beta_v * v
            + dgp.beta_x * x
            + dgp.beta_n * (rec.n - en)
        )

    def eta_dagger(a, a_star, m_own, rec, j):
        m_own = np.asarray(m_own, dtype=float)
        mu = dgp.mediator_mean(a_star, rec)
        spill = (mu.sum() - mu[j]) / (rec.n - 1) * dgp.beta_spill if rec.n > 1 else 0.0
        v = rec.v[0] if rec.d_v else 0.0
        x = rec.x[j, 0] if rec.d_x else 0.0
        return (
            dgp.beta0
            + dgp.beta_a * a
            + dgp.beta_own * m_own
            + spill
            + dgp.beta_v * v
            + dgp.beta_x * x
            + dgp.beta_n * (rec.n - en)
        )

    def eta_dagger_all(a, a_star, m, rec):
        m = np.asarray(m, dtype=float)
        mu = dgp.mediator_mean(a_star, rec)
        if rec.n > 1:
            spill = dgp.beta_spill * (mu.sum() - mu) / (rec.n - 1)
        else:
            spill = np.zeros(1)
        v = rec.v[0] if rec.d_v else 0.0
        x = rec.x[:, 0] if rec.d_x else np.zeros(rec.n)
        return (
            dgp.beta0
            + dgp.beta_a * a
            + dgp.beta_own * m
            + spill
            + dgp.beta_v * v
            + dgp.beta_x * x
            + dgp.beta_n * (rec.n - en)
        )

    return NuisanceSet(
        eta=eta,
        kappa_j=marginal.pdf,
        kappa_j_cdf=marginal.cdf,
        kappa_j_ppf=marginal.ppf,
        kappa_j_latent=marginal.from_latent,
        kappa_joint=joint,
        kappa_minus_j=minus_j,
        kappa_cond_j=cond_j,
        propensity=propensity,
        eta_star=eta_star,
        eta_dagger=eta_dagger,
        eta_dagger_all=eta_dagger_all,
        rho=dgp.rho,
        support=None,
        diagnostics={"oracle": True},
    )


# ----------------------------------------------------------------------------
# Finite-support DGP (binary mediator, small clusters).
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteDgp:
    """Binary-mediator DGP whose every law is a finite exact sum.

    Within a cluster, mediators are independent draws given a latent cluster
    class ``u``; marginalizing the class induces exchangeable dependence.
    Counterfactual worlds use independent latent classes, so one member's
    treated-world mediator is independent of the others' control-world
    mediators given covariates and size. The mediator probability is
    ``(p_base + p_a*a + p_u*u + p_v*v) / p_denom`` with integer numerators, so
    all configuration probabilities are rational (used to build exact-design
    trials).
    """

    size_pmf: Mapping[int, float] = field(
        default_factory=lambda: {1: 0.25, 2: 0.5, 3: 0.25}
    )
    pi: float = 0.5
    v_pmf: Mapping[float, float] | None = None
    mix_pmf: Mapping[int, float] = field(default_factory=lambda: {0: 0.5, 1: 0.5})
    p_base: int = 2
    p_a: int = 3
    p_u: int = 2
    p_v: int = 0
    p_denom: int = 10
    beta0: float = 0.5
    beta_a: float = 1.0
    beta_own: float = 2.0
    beta_spill: float = 1.5
    beta_v: float = 0.0
    beta_n: float = 0.25
    sigma_y: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "size_pmf", _normalize_pmf(self.size_pmf))
        object.__setattr__(self, "mix_pmf", _normalize_pmf(self.mix_pmf))
        if self.v_pmf is not None:
            object.__setattr__(self, "v_pmf", _normalize_pmf(self.v_pmf))
        for a in (0, 1):
            for u in self.mix_pmf:
                for v in (self.v_pmf or {0.0: 1.0}):
                    p = self.prob_m1(a, v, u)
                    if not 0.0 < p < 1.0:
                        raise ValueError(f"mediator probability {p} outside (0,1)")

    @property
    def mean_size(self) -> float:
        return float(sum(n * p for n, p in self.size_pmf.items()))

    def prob_m1(self, a, v, u) -> float:
        return (self.p_base + self.p_a * a + self.p_u * u + self.p_v * v) / self.p_denom

    def prob_m1_frac(self, a, v, u) -> Fraction:
        num = self.p_base + self.p_a * a + self.p_u * u + int(self.p_v * v)
        return Fraction(num, self.p_denom)

    def outcome_mean(self, a, m, rec_or_v, n=None) -> np.ndarray:
        """Outcome mean; accepts a record or raw (v, n) for enumeration."""
        if n is None:
            rec = rec_or_v
            v = rec.v[0] if rec.d_v else 0.0
            n = rec.n
        else:
            v = rec_or_v
        m = np.asarray(m, dtype=float)
        if n == 1:
            loo = np.zeros_like(m)
        else:
            loo = (m.sum(axis=-1, keepdims=True) - m) / (n - 1)
        return (
            self.beta0
            + self.beta_a * a
            + self.beta_own * m
            + self.beta_spill * loo
            + self.beta_v * v
            + self.beta_n * (n - self.mean_size)
        )

    # exact mediator laws -----------------------------------------------------

    def _v_of(self, rec: ClusterRecord) -> float:
        return rec.v[0] if rec.d_v else 0.0

    def kappa_joint_vn(self, a, m, v, n) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        out = np.zeros(m.shape[:-1])
        for u, q in self.mix_pmf.items():
            p = self.prob_m1(a, v, u)
            out = out + q * np.prod(p * m + (1 - p) * (1 - m), axis=-1)
        return out

    def generate(self, k: int, seed: int) -> Trial:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(202,)))
        sizes = list(self.size_pmf)
        size_probs = np.array([self.size_pmf[n] for n in sizes])
        vs = list(self.v_pmf) if self.v_pmf else None
        v_probs = np.array([self.v_pmf[v] for v in vs]) if vs else None
        us = list(self.mix_pmf)
        u_probs = np.array([self.mix_pmf[u] for u in us])
        clusters = []
        for i in range(k):
            n = int(rng.choice(sizes, p=size_probs))
            v_val = float(rng.choice(vs, p=v_probs)) if vs else None
            v = np.array([v_val]) if vs else np.zeros(0)
            a = int(rng.random() < self.pi)
            u = int(rng.choice(us, p=u_probs))
            p = self.prob_m1(a, v_val if vs else 0.0, u)
            m = (rng.random(n) < p).astype(float)
            rec0 = ClusterRecord(
                id=f"f{i:05d}", n=n, v=v, x=np.zeros((n, 0)), a=a, m=m, y=np.zeros(n)
            )
            y = self.outcome_mean(a, m, rec0) + self.sigma_y * rng.standard_normal(n)
            clusters.append(replace(rec0, y=y))
        return Trial(clusters=tuple(clusters), pi=self.pi, mediator_support=(0.0, 1.0))

    def _vn_pairs(self):
        vs = list(self.v_pmf.items()) if self.v_pmf else [(0.0, 1.0)]
        for n, pn in self.size_pmf.items():
            for v, pv in vs:
                yield n, pn, v, pv

    def oracle(self) -> OracleTruth:
        """Exact estimands by full enumeration of mediator configurations."""
        theta_c = {c: 0.0 for c in ((1, 1), (1, 0), (0, 0))}
        theta_i = {c: 0.0 for c in ((1, 1), (1, 0), (0, 0))}
        tau_c = tau_i = 0.0
        en = self.mean_size
        for n, pn, v, pv in self._vn_pairs():
            grid = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
            for c in theta_c:
                a, a_star = c
                w = self.kappa_joint_vn(a_star, grid, v, n)
                eta = self.outcome_mean(a, grid, v, n)
                val = float(w @ eta.mean(axis=1))
                theta_c[c] += pn * pv * val
                theta_i[c] += (n * pn / en) * pv * val
            # cross-world weights: own mediator treated, the rest control
            val = 0.0
            for j in range(n):
                kj = np.zeros(grid.shape[0])
                for u, q in self.mix_pmf.items():
                    p1 = self.prob_m1(1, v, u)
                    kj += q * (p1 * grid[:, j] + (1 - p1) * (1 - grid[:, j]))
                others = [l for l in range(n) if l != j]
                kminus = np.zeros(grid.shape[0])
                for u, q in self.mix_pmf.items():
                    p0 = self.prob_m1(0, v, u)
                    sub = grid[:, others]
                    kminus += q * np.prod(p0 * sub + (1 - p0) * (1 - sub), axis=-1)
                eta = self.outcome_mean(1, grid, v, n)[:, j]
                val += float((kj * kminus) @ eta) / n
            tau_c += pn * pv * val
            tau_i += (n * pn / en) * pv * val
        return OracleTruth(theta_c, theta_i, tau_c, tau_i, method="enumeration")


def _finite_oracle_nuisances(dgp: FiniteDgp) -> NuisanceSet:
    def eta(a, m, rec):
        return dgp.outcome_mean(a, m, rec)

    def kappa_joint(a, m, rec):
        return dgp.kappa_joint_vn(a, m, dgp._v_of(rec), rec.n)

    def kappa_j(a, m, rec):
        m = np.asarray(m, dtype=float)
        v = dgp._v_of(rec)
        out = np.zeros(m.shape)
        for u, q in dgp.mix_pmf.items():
            p = dgp.prob_m1(a, v, u)
            out = out + q * (p * m + (1 - p) * (1 - m))
        return out

    def kappa_j_cdf(a, m, rec):
        m = np.asarray(m, dtype=float)
        v = dgp._v_of(rec)
        p1 = sum(q * dgp.prob_m1(a, v, u) for u, q in dgp.mix_pmf.items())
        return np.where(m < 0.0, 0.0, np.where(m < 1.0, 1.0 - p1, 1.0))

    def kappa_j_ppf(a, u_vals, rec):
        v = dgp._v_of(rec)
        p1 = sum(q * dgp.prob_m1(a, v, u) for u, q in dgp.mix_pmf.items())
        return (np.asarray(u_vals, dtype=float) > 1.0 - p1).astype(float)

    def kappa_minus_j(a, m, rec, j):
        m = np.asarray(m, dtype=float)
        keep = [l for l in range(rec.n) if l != j]
        if not keep:
            return np.ones(m.shape[:-1])
        v = dgp._v_of(rec)
        sub = m[..., keep]
        out = np.zeros(m.shape[:-1])
        for u, q in dgp.mix_pmf.items():
            p = dgp.prob_m1(a, v, u)
            out = out + q * np.prod(p * sub + (1 - p) * (1 - sub), axis=-1)
        return out

    def kappa_cond_j(a, m, rec, j):
        return kappa_joint(a, m, rec) / kappa_minus_j(a, m, rec, j)

    def propensity(a, m, rec):
        k1 = kappa_joint(1, m, rec)
        k0 = kappa_joint(0, m, rec)
        p1 = dgp.pi * k1 / (dgp.pi * k1 + (1 - dgp.pi) * k0)
        return p1 if a == 1 else 1.0 - p1

    def eta_star(a, a_star, rec):
        grid = np.array(list(itertools.product((0.0, 1.0), repeat=rec.n)))
        w = kappa_joint(a_star, grid, rec)
        return w @ eta(a, grid, rec)

    def eta_dagger(a, a_star, m_own, rec, j):
        m_own = np.asarray(m_own, dtype=float)
        others = [l for l in range(rec.n) if l != j]
        if not others:
            return eta(a, m_own[..., None], rec)[..., 0]
        grid = np.array(list(itertools.product((0.0, 1.0), repeat=len(others))))
        full = np.insert(grid, j, 0.0, axis=1)
        w = kappa_minus_j(a_star, full, rec, j)
        flat = m_own.reshape(-1)
        out = np.empty(flat.shape)
        for idx, val in enumerate(flat):
            full[:, j] = val
            out[idx] = w @ eta(a, full, rec)[:, j]
        return out.reshape(m_own.shape)

    return NuisanceSet(
        eta=eta,
        kappa_j=kappa_j,
        kappa_j_cdf=kappa_j_cdf,
        kappa_j_ppf=kappa_j_ppf,
        kappa_joint=kappa_joint,
        kappa_minus_j=kappa_minus_j,
        kappa_cond_j=kappa_cond_j,
        propensity=propensity,
        eta_star=eta_star,
        eta_dagger=eta_dagger,
        rho=0.0,
        support=(0.0, 1.0),
        diagnostics={"oracle": True},
    )


def exact_proportions_trial(dgp: FiniteDgp, max_clusters: int = 200_000) -> Trial:
    """A trial whose empirical distribution equals the DGP's law exactly.

    Every possible cluster configuration (size, covariate, arm, mediator
    vector) appears with multiplicity proportional to its exact rational
    probability, and outcomes are set to their conditional means. Estimators
    fed exact nuisances then reproduce the population estimands to floating
    point accuracy.
    """
    if dgp.sigma_y != 0.0:
        raise ValueError("exact-design trials require a noiseless outcome (sigma_y=0)")
    configs = []
    vs = list(dgp.v_pmf.items()) if dgp.v_pmf else [(0.0, 1.0)]
    pi_frac = Fraction(dgp.pi).limit_denominator(10**6)
    for n, pn in dgp.size_pmf.items():
        pn_frac = Fraction(pn).limit_denominator(10**6)
        for v, pv in vs:
            pv_frac = Fraction(pv).limit_denominator(10**6)
            for a, pa in ((1, pi_frac), (0, 1 - pi_frac)):
                for m in itertools.product((0, 1), repeat=n):
                    pm = Fraction(0)
                    for u, q in dgp.mix_pmf.items():
                        q_frac = Fraction(q).limit_denominator(10**6)
                        p = dgp.prob_m1_frac(a, v, u)
                        term = q_frac
                        for mj in m:
                            term *= p if mj else (1 - p)
                        pm += term
                    prob = pn_frac * pv_frac * pa * pm
                    configs.append((n, v, a, np.array(m, dtype=float), prob))
    denom = math.lcm(*[c[-1].denominator for c in configs])
    if denom > max_clusters:
        raise ValueError(f"exact design needs {denom} clusters; simplify the probabilities")
    clusters = []
    idx = 0
    for n, v, a, m, prob in configs:
        count = int(prob * denom)
        if count * 1 != prob * denom:
            raise AssertionError("non-integer configuration count")
        varr = np.array([v]) if dgp.v_pmf else np.zeros(0)
        for _ in range(count):
            rec0 = ClusterRecord(
                id=f"e{idx:06d}", n=n, v=varr, x=np.zeros((n, 0)), a=a, m=m, y=np.zeros(n)
            )
            y = dgp.outcome_mean(a, m, rec0)
            clusters.append(replace(rec0, y=y))
            idx += 1
    return Trial(clusters=tuple(clusters), pi=dgp.pi, mediator_support=(0.0, 1.0))


# ----------------------------------------------------------------------------
# Dispatchers.
# ----------------------------------------------------------------------------


def generate_trial(dgp, k: int, seed: int) -> Trial:
    return dgp.generate(k, seed)


def oracle_truth(dgp, method: str = "auto", draws: int = 10**6, seed: int = 0,
                 tol: float | None = None) -> OracleTruth:
    """True estimands: exact enumeration or closed form by default, Monte Carlo on request."""
    if method == "auto":
        return dgp.oracle()
    if method == "mc":
        if not isinstance(dgp, LinearGaussianDgp):
            raise ValueError("the Monte Carlo oracle applies to the continuous DGP")
        return dgp.oracle_mc(draws=draws, seed=seed, tol=tol)
    raise ValueError(f"unknown oracle method {method!r}")


def oracle_nuisances(dgp) -> NuisanceSet:
    """Exact nuisance functions of a DGP, pluggable into any estimator."""
    if isinstance(dgp, LinearGaussianDgp):
        return _linear_oracle_nuisances(dgp)
    if isinstance(dgp, FiniteDgp):
        return _finite_oracle_nuisances(dgp)
    raise TypeError(f"no oracle nuisances for {type(dgp).__name__}")


def rps_like_dgp() -> LinearGaussianDgp:
    """A continuous DGP shaped like a small food-security trial.

    42 clusters of roughly 10 households; mediator on a 0-12 diversity-score
    range treated as continuous; outcome centered near -1.7 with spread 1.2.
    """
    return LinearGaussianDgp(
        size_pmf={7: 0.125, 8: 0.125, 9: 0.125, 10: 0.125, 11: 0.125, 12: 0.125,
                  13: 0.125, 14: 0.125},
        pi=0.5,
        alpha0=6.0,
        alpha_a=0.8,
        alpha_v=0.5,
        alpha_x=0.4,
        alpha_n=0.0,
        sigma_m=2.0,
        rho=0.15,
        beta0=-2.2,
        beta_a=0.15,
        beta_own=0.06,
        beta_spill=0.02,
        beta_v=0.3,
        beta_x=0.25,
        beta_n=0.0,
        sigma_y=1.0,
    )


# ----------------------------------------------------------------------------
# Scenario runner.
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioResult:
    """Aggregated replicate metrics for one estimator and one quantity."""

    estimator: str
    quantity: str
    truth: float
    mean_bias: float
    mc_sd: float
    mean_se: float | None
    coverage: float | None
    n_reps: int
    n_failed: int


def _estimand_values(points) -> dict[str, float]:
    out = {}
    for c, val in points.theta_c.items():
        out[f"theta_c({c[0]},{c[1]})"] = val
    for c, val in points.theta_i.items():
        out[f"theta_i({c[0]},{c[1]})"] = val
    out["tau_c"] = points.tau_c
    out["tau_i"] = points.tau_i
    return out


def _truth_values(truth: OracleTruth, scale: EffectScale) -> dict[str, float]:
    out = {}
    for c, val in truth.theta_c.items():
        out[f"theta_c({c[0]},{c[1]})"] = val
    for c, val in truth.theta_i.items():
        out[f"theta_i({c[0]},{c[1]})"] = val
    out["tau_c"] = truth.tau_c
    out["tau_i"] = truth.tau_i
    out.update(oracle_effects(truth, scale))
    return out


def run_scenario(
    dgp,
    k: int,
    replicates: int,
    estimators: Sequence[EstimatorSpec],
    misspec: Misspecification | None = None,
    inference: InferenceSpec | None = None,
    scale: EffectScale = EffectScale("difference"),
    truth: OracleTruth | None = None,
    seed: int = 0,
    cfg: SummaryConfig = SummaryConfig(),
) -> list[ScenarioResult]:
    """Replicate a DGP, run every estimator, and aggregate bias/spread/coverage.

    Failed replicates are logged, excluded and counted; a scenario with more
    than 2% failures for any estimator triggers a warning. Interval metrics
    are collected only when ``inference`` is given.
    """
    truth = truth or oracle_truth(dgp)
    truths = _truth_values(truth, scale)
    per = {
        spec.label: {q: [] for q in truths}
        for spec in estimators
    }
    ses = {spec.label: {q: [] for q in truths} for spec in estimators}
    covers = {spec.label: {q: [] for q in truths} for spec in estimators}
    failures = {spec.label: 0 for spec in estimators}
    root = np.random.SeedSequence(seed)
    for r in range(replicates):
        rep_seed = int(root.spawn(1)[0].generate_state(1)[0] % 2**31)
        trial = generate_trial(dgp, k, seed=rep_seed)
        for spec in estimators:
            run_spec = replace(
                spec,
                seed=rep_seed,
                integration=replace(spec.integration, seed=rep_seed),
            )
            try:
                if inference is None:
                    res = estimate(trial, run_spec, cfg=cfg, misspec=misspec)
                    values = _estimand_values(res.points)
                    values.update(assemble_effects(res.points, scale).effects)
                    intervals = {}
                else:
                    res, intervals = estimate_with_intervals(
                        trial,
                        run_spec,
                        replace(inference, seed=rep_seed),
                        scale,
                        cfg=cfg,
                        misspec=misspec,
                    )
                    values = _estimand_values(res.points)
                    values.update(assemble_effects(res.points, scale).effects)
            except Exception as exc:  # noqa: BLE001 - replicate failures are data
                failures[spec.label] += 1
                warnings.warn(f"replicate {r} failed for {spec.label}: {exc}", RuntimeWarning)
                continue
            for q, val in values.items():
                per[spec.label][q].append(val)
                interval = intervals.get(q)
                if interval is not None:
                    ses[spec.label][q].append(interval.se)
                    covers[spec.label][q].append(
                        interval.lower <= truths[q] <= interval.upper
                    )
    results = []
    for spec in estimators:
        label = spec.label
        if failures[label] > 0.02 * replicates:
            warnings.warn(
                f"{label}: {failures[label]} of {replicates} replicates failed",
                RuntimeWarning,
            )
        for q, vals in per[label].items():
            arr = np.asarray(vals)
            if arr.size == 0:
                continue
            results.append(
                ScenarioResult(
                    estimator=label,
                    quantity=q,
                    truth=truths[q],
                    mean_bias=float(arr.mean() - truths[q]),
                    mc_sd=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                    mean_se=float(np.mean(ses[label][q])) if ses[label][q] else None,
                    coverage=float(np.mean(covers[label][q])) if covers[label][q] else None,
                    n_reps=int(arr.size),
                    n_failed=failures[label],
                )
            )
    return results
