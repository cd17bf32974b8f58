"""Nuisance models for clustered mediation estimation.

The estimators only ever talk to a :class:`NuisanceSet`, a bundle of
evaluator callables:

``eta``
    conditional outcome mean given (arm, all mediators, covariates, size),
    evaluated for every cluster member at once;
``kappa_j`` / ``kappa_j_cdf`` / ``kappa_j_ppf``
    per-member marginal mediator density, CDF and quantile function;
``kappa_joint`` / ``kappa_minus_j`` / ``kappa_cond_j``
    joint mediator density of the whole cluster, of everyone but one member,
    and of one member given the rest;
``propensity``
    probability of each arm given mediators, covariates and size;
``eta_star`` / ``eta_dagger``
    sequential regressions used by the reparameterized scores: the cross-arm
    mean of ``eta``, and the cross-arm mean of ``eta`` times a marginal-to-
    conditional density ratio given one member's own mediator.

Everything here is also implementable from a known data-generating process,
so tests can inject exact nuisances and isolate the estimator algebra.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import ndtr, ndtri

from .data import ClusterRecord, SummaryConfig, Trial
from .learners import GlmBackend, SplineRidgeBackend

__all__ = [
    "Misspecification",
    "NuisanceSet",
    "fit_glm_backend",
    "fit_outcome_model",
    "fit_marginal_mediator",
    "fit_copula",
    "copula_densities",
    "fit_propensity",
    "fit_eta_star",
    "fit_eta_dagger",
    "fit_nuisances",
]

_Z_EPS = 1e-12


# ----------------------------------------------------------------------------
# Exchangeable-correlation normal helpers. The within-cluster dependence model
# is a single correlation rho shared by every pair of latent normal scores.
# ----------------------------------------------------------------------------


def exch_rho_lower(n_max: int) -> float:
    """Smallest valid correlation for the largest observed cluster size."""
    return -1.0 / (n_max - 1) if n_max > 1 else -1.0


def _check_rho(rho: float, n: int):
    if n > 1 and not (-1.0 / (n - 1) < rho < 1.0):
        raise ValueError(
            f"latent correlation {rho} is invalid for cluster size {n}; "
            f"must be in ({-1.0 / (n - 1):.4f}, 1)"
        )


def exch_logdet(n: int, rho: float) -> float:
    if n <= 1:
        return 0.0
    return (n - 1) * np.log1p(-rho) + np.log1p((n - 1) * rho)


def exch_quadform(z: np.ndarray, rho: float) -> np.ndarray:
    """z' R(rho)^{-1} z along the last axis, via the closed-form inverse."""
    n = z.shape[-1]
    if n == 1:
        return z[..., 0] ** 2
    ssq = np.sum(z**2, axis=-1)
    s = np.sum(z, axis=-1)
    return (ssq - rho * s**2 / (1.0 + (n - 1) * rho)) / (1.0 - rho)


def exch_copula_logdensity(z: np.ndarray, rho: float) -> np.ndarray:
    """Log density of the normal-scores dependence factor at latent scores z."""
    n = z.shape[-1]
    if n == 1 or rho == 0.0:
        return np.zeros(z.shape[:-1])
    _check_rho(rho, n)
    ssq = np.sum(z**2, axis=-1)
    return -0.5 * exch_logdet(n, rho) - 0.5 * (exch_quadform(z, rho) - ssq)


def exch_conditional(z_others: np.ndarray, n: int, rho: float) -> tuple[np.ndarray, float]:
    """Mean and variance of one latent score given the other n-1 scores."""
    if n == 1:
        return np.zeros(z_others.shape[:-1]), 1.0
    _check_rho(rho, n)
    s = np.sum(z_others, axis=-1)
    denom = 1.0 + (n - 2) * rho
    mean = rho * s / denom
    var = 1.0 - rho**2 * (n - 1) / denom
    return mean, float(var)


def exch_cholesky(n: int, rho: float) -> np.ndarray:
    _check_rho(rho, n)
    corr = np.full((n, n), rho)
    np.fill_diagonal(corr, 1.0)
    return np.linalg.cholesky(corr)


def _norm_pdf(z):
    return np.exp(-0.5 * z**2) / np.sqrt(2.0 * np.pi)


# ----------------------------------------------------------------------------
# Design-block machinery. Models declare which named blocks they use, so
# misspecification scenarios can corrupt a working model by dropping blocks.
# ----------------------------------------------------------------------------

ETA_BLOCKS = ("treat", "m_own", "m_loo", "singleton", "x_own", "x_loo", "v", "n")
KAPPA_BLOCKS = ("treat", "singleton", "x_own", "x_loo", "v", "n")
COND_BLOCKS = ("treat", "m_loo", "singleton", "x_own", "x_loo", "v", "n")
ETA_STAR_BLOCKS = ("treat", "singleton", "x_own", "x_loo", "v", "n")
ETA_DAGGER_BLOCKS = ("treat", "m_own", "singleton", "x_own", "x_loo", "v", "n")
# Cluster-level propensity features use within-cluster sums so that, for a
# homoscedastic exchangeable-normal mediator with independent coordinates, the
# implied logistic model is exactly linear in the features.
PROPENSITY_BLOCKS = ("n", "v", "nv", "m_sum", "x_sum")


def _loo(values: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    if n == 1:
        return np.zeros_like(values)
    return (values.sum(axis=-1, keepdims=True) - values) / (n - 1)


def _block_width(name: str, rec: ClusterRecord) -> int:
    if name in ("x_own", "x_loo", "x_sum"):
        return rec.d_x
    if name in ("v", "nv"):
        return rec.d_v
    return 1


def individual_design(blocks: Sequence[str], a, m: np.ndarray, rec: ClusterRecord) -> np.ndarray:
    """Design array of shape (..., n, p) for all members, given mediators (..., n)."""
    m = np.asarray(m, dtype=float)
    n = rec.n
    lead = m.shape[:-1]
    p = sum(_block_width(b, rec) for b in blocks)
    out = np.empty(lead + (n, p))
    col = 0
    for name in blocks:
        w = _block_width(name, rec)
        if name == "treat":
            out[..., col] = float(a)
        elif name == "m_own":
            out[..., col] = m
        elif name == "m_loo":
            out[..., col] = _loo(m)
        elif name == "singleton":
            out[..., col] = 1.0 if n == 1 else 0.0
        elif name == "x_own":
            out[..., col : col + w] = rec.x
        elif name == "x_loo":
            xloo = np.zeros_like(rec.x) if n == 1 else (rec.x.sum(0) - rec.x) / (n - 1)
            out[..., col : col + w] = xloo
        elif name == "v":
            out[..., col : col + w] = rec.v
        elif name == "n":
            out[..., col] = float(n)
        else:
            raise ValueError(f"unknown design block {name!r}")
        col += w
    return out


def individual_design_one(
    blocks: Sequence[str], a, m_own: np.ndarray, rec: ClusterRecord, j: int
) -> np.ndarray:
    """Design array (..., p) for member ``j`` with its own mediator set to ``m_own``."""
    m_own = np.asarray(m_own, dtype=float)
    lead = m_own.shape
    n = rec.n
    p = sum(_block_width(b, rec) for b in blocks)
    out = np.empty(lead + (p,))
    col = 0
    for name in blocks:
        w = _block_width(name, rec)
        if name == "treat":
            out[..., col] = float(a)
        elif name == "m_own":
            out[..., col] = m_own
        elif name == "singleton":
            out[..., col] = 1.0 if n == 1 else 0.0
        elif name == "x_own":
            out[..., col : col + w] = rec.x[j]
        elif name == "x_loo":
            xloo = np.zeros(rec.d_x) if n == 1 else (rec.x.sum(0) - rec.x[j]) / (n - 1)
            out[..., col : col + w] = xloo
        elif name == "v":
            out[..., col : col + w] = rec.v
        elif name == "n":
            out[..., col] = float(n)
        else:
            raise ValueError(f"block {name!r} not valid for single-member designs")
        col += w
    return out


def cluster_design(blocks: Sequence[str], m: np.ndarray, rec: ClusterRecord) -> np.ndarray:
    """Cluster-level design (..., p) given mediators (..., n)."""
    m = np.asarray(m, dtype=float)
    lead = m.shape[:-1]
    p = sum(_block_width(b, rec) for b in blocks)
    out = np.empty(lead + (p,))
    col = 0
    for name in blocks:
        w = _block_width(name, rec)
        if name == "n":
            out[..., col] = float(rec.n)
        elif name == "v":
            out[..., col : col + w] = rec.v
        elif name == "nv":
            out[..., col : col + w] = rec.n * rec.v
        elif name == "m_sum":
            out[..., col] = m.sum(axis=-1)
        elif name == "x_sum":
            out[..., col : col + w] = rec.x.sum(0)
        else:
            raise ValueError(f"unknown cluster design block {name!r}")
        col += w
    return out


def _block_names(blocks: Sequence[str], rec: ClusterRecord) -> list[str]:
    names = []
    for name in blocks:
        if name in ("x_own", "x_loo", "x_sum"):
            names += [f"{name}{k}" for k in range(rec.d_x)]
        elif name in ("v", "nv"):
            names += [f"{name}{k}" for k in range(rec.d_v)]
        else:
            names.append(name)
    return names


@dataclass
class _FittedMean:
    """A fitted mean model plus the mask of non-constant columns it was trained on.

    Constant columns (for example the singleton flag when no singleton cluster
    exists) are absorbed by the intercept and removed before fitting, keeping
    the design full rank without changing the model space. For plain GLMs the
    mask is folded into a full-width coefficient vector so prediction is a
    single matrix product without column copies.
    """

    model: object
    mask: np.ndarray

    def __post_init__(self):
        self.coef_full = None
        self.intercept = 0.0
        from .learners import GlmModel  # local import to avoid a cycle at module load

        if isinstance(self.model, GlmModel) and self.model.add_intercept:
            full = np.zeros(self.mask.size)
            full[self.mask] = self.model.coef[1:]
            self.coef_full = full
            self.intercept = float(self.model.coef[0])

    def linpred_full(self, x: np.ndarray) -> np.ndarray:
        return x @ self.coef_full + self.intercept

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.coef_full is not None:
            eta = self.linpred_full(x)
            if self.model.family == "gaussian":
                return eta
            from scipy.special import expit

            return np.clip(expit(eta), self.model.clip, 1.0 - self.model.clip)
        flat = x.reshape(-1, x.shape[-1])[:, self.mask]
        return self.model.predict(flat).reshape(x.shape[:-1])


def _fit_mean(backend, x, y, family, names, weights=None) -> _FittedMean:
    x = np.asarray(x, dtype=float)
    mask = np.ptp(x, axis=0) > 0
    # Structurally redundant columns can arise from the automatic feature
    # maps (for example the singleton flag is collinear with cluster size
    # when only two sizes occur); drop them rather than reject the fit.
    if mask.any():
        sub = x[:, mask]
        centered = sub - sub.mean(axis=0)
        norms = np.linalg.norm(centered, axis=0)
        centered = centered / np.where(norms > 0, norms, 1.0)
        _, r, piv = scipy.linalg.qr(centered, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = max(centered.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        rank = int(np.sum(diag > max(tol, 1e-10)))
        if rank < centered.shape[1]:
            kept_idx = sorted(piv[:rank])
            full_idx = np.flatnonzero(mask)[kept_idx]
            mask = np.zeros_like(mask)
            mask[full_idx] = True
    kept = [nm for nm, keep in zip(names, mask) if keep]
    model = backend.fit(x[:, mask], y, family=family, names=kept, weights=weights)
    return _FittedMean(model=model, mask=mask)


def _resolve_backend(backend, trial: Trial, eps: float):
    if backend == "parametric":
        return GlmBackend(clip=eps)
    if backend == "ml":
        return SplineRidgeBackend(n_clusters=trial.k, clip=eps)
    return backend


# ----------------------------------------------------------------------------
# Misspecification switches for simulation studies: each flag corrupts one
# working model by dropping blocks from its feature map or pinning a value.
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Misspecification:
    outcome_omit_mediator: bool = False
    mediator_omit_treatment: bool = False
    force_rho: float | None = None
    propensity_intercept_only: bool = False

    def eta_blocks(self) -> tuple[str, ...]:
        if self.outcome_omit_mediator:
            return tuple(b for b in ETA_BLOCKS if b not in ("m_own", "m_loo"))
        return ETA_BLOCKS

    def kappa_blocks(self) -> tuple[str, ...]:
        if self.mediator_omit_treatment:
            return tuple(b for b in KAPPA_BLOCKS if b != "treat")
        return KAPPA_BLOCKS

    def cond_blocks(self) -> tuple[str, ...]:
        if self.mediator_omit_treatment:
            return tuple(b for b in COND_BLOCKS if b != "treat")
        return COND_BLOCKS

    def propensity_blocks(self) -> tuple[str, ...]:
        return () if self.propensity_intercept_only else PROPENSITY_BLOCKS


# ----------------------------------------------------------------------------
# Individual nuisance models.
# ----------------------------------------------------------------------------


@dataclass
class OutcomeModel:
    """Pooled regression of individual outcomes on arm, mediator summaries and covariates."""

    fitted: _FittedMean
    blocks: tuple[str, ...]
    family: str = "gaussian"

    def __post_init__(self):
        # For a linear model the prediction separates into a per-(arm, cluster)
        # base plus mediator terms, which avoids rebuilding the design tensor
        # for every batch of mediator draws. Needs the mediator columns to sit
        # before any record-width-dependent block, which our layouts guarantee.
        self._base_cache: dict[tuple[int, int], np.ndarray] = {}
        self._w_own = self._w_loo = 0.0
        self._linear = False
        self._spline = None if self.fitted.coef_full is not None else self._spline_terms()
        if self.fitted.coef_full is not None and self.family == "gaussian":
            fixed_cols = {}
            col = 0
            for name in self.blocks:
                if name in ("x_own", "x_loo", "v"):
                    break
                fixed_cols[name] = col
                col += 1
            m_resolved = all(
                b not in self.blocks or b in fixed_cols for b in ("m_own", "m_loo")
            )
            if m_resolved:
                self._linear = True
                if "m_own" in fixed_cols:
                    self._w_own = float(self.fitted.coef_full[fixed_cols["m_own"]])
                if "m_loo" in fixed_cols:
                    self._w_loo = float(self.fitted.coef_full[fixed_cols["m_loo"]])

    def _spline_terms(self):
        """Separable view of a fitted spline model with respect to the mediator columns.

        The basis is additive per feature plus raw pairwise products, so a
        batch that varies only the mediator columns needs one base prediction
        per (arm, cluster) and two scalar spline evaluations per draw. Needs
        the mediator columns to precede any record-width block (our layouts do).
        """
        from .learners import SplineRidgeModel

        model = self.fitted.model
        if not isinstance(model, SplineRidgeModel) or model.family != "gaussian":
            return None
        fixed_cols = {}
        col = 0
        for name in self.blocks:
            if name in ("x_own", "x_loo", "v"):
                break
            fixed_cols[name] = col
            col += 1
        for name in ("m_own", "m_loo"):
            if name in self.blocks and name not in fixed_cols:
                return None
        kept_index = {int(c): i for i, c in enumerate(np.flatnonzero(self.fitted.mask))}
        per_feature, pair_coefs = model.feature_terms()
        spec = {"model": model, "per_feature": per_feature, "pair_coefs": pair_coefs}
        for name in ("m_own", "m_loo"):
            design_col = fixed_cols.get(name)
            spec[name] = kept_index.get(design_col) if design_col is not None else None
        return spec

    def _base(self, a, rec: ClusterRecord) -> np.ndarray:
        """Prediction at zero mediators plus, for splines, the cross-term slopes."""
        key = (int(a), id(rec))
        cached = self._base_cache.get(key)
        if cached is None:
            if len(self._base_cache) > 8192:
                self._base_cache.clear()
            design = individual_design(self.blocks, a, np.zeros(rec.n), rec)
            if self._spline is None:
                cached = self.fitted.predict(design)
            else:
                sp = self._spline
                x0 = design[..., self.fitted.mask]
                pred0 = sp["model"].predict(x0)
                const = pred0
                cross = {}
                for name in ("m_own", "m_loo"):
                    k = sp[name]
                    if k is None:
                        cross[name] = np.zeros(rec.n)
                        continue
                    const = const - self._fval(k, np.zeros(rec.n))
                    slope = np.zeros(rec.n)
                    for (i, jj), gamma in sp["pair_coefs"].items():
                        other = jj if i == k else (i if jj == k else None)
                        if other is None or other in (sp["m_own"], sp["m_loo"]):
                            continue
                        slope = slope + gamma * x0[:, other]
                    cross[name] = slope
                gamma_mm = 0.0
                if sp["m_own"] is not None and sp["m_loo"] is not None:
                    pair = tuple(sorted((sp["m_own"], sp["m_loo"])))
                    gamma_mm = sp["pair_coefs"].get(pair, 0.0)
                cached = (const, cross["m_own"], cross["m_loo"], gamma_mm)
            self._base_cache[key] = cached
        return cached

    def _fval(self, k, values):
        from .learners import _bspline_dense

        sp = self._spline
        kind, seg, knots, rng = sp["per_feature"][k]
        values = np.asarray(values, dtype=float)
        if kind == "linear":
            return np.clip(values, *rng) * seg[0]
        flat = values.reshape(-1)
        basis = _bspline_dense(flat, knots, sp["model"].basis.degree)[:, 1:]
        return (basis @ seg).reshape(values.shape)

    def __call__(self, a, m, rec: ClusterRecord) -> np.ndarray:
        if self._linear:
            m = np.asarray(m, dtype=float)
            out = self._base(a, rec) + self._w_own * m
            if self._w_loo != 0.0:
                out = out + self._w_loo * _loo(m)
            return out
        if self._spline is not None:
            m = np.asarray(m, dtype=float)
            const, cross_m, cross_loo, gamma_mm = self._base(a, rec)
            loo = _loo(m)
            sp = self._spline
            out = const + cross_m * m + cross_loo * loo + gamma_mm * m * loo
            if sp["m_own"] is not None:
                out = out + self._fval(sp["m_own"], m)
            if sp["m_loo"] is not None:
                out = out + self._fval(sp["m_loo"], loo)
            return out
        return self.fitted.predict(individual_design(self.blocks, a, m, rec))


@dataclass
class MediatorMarginalGaussian:
    """Homoscedastic gaussian model for one member's mediator given arm and covariates."""

    fitted: _FittedMean
    blocks: tuple[str, ...]
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"fitted mediator residual sd must be positive, got {self.sigma}")
        self._mean_cache: dict[tuple[int, int], np.ndarray] = {}

    def mean(self, a, rec: ClusterRecord) -> np.ndarray:
        # The mean depends on (arm, cluster) only; density/CDF/quantile calls
        # hit it many times per cluster, so memoize by record identity.
        key = (int(a), id(rec))
        cached = self._mean_cache.get(key)
        if cached is None:
            if len(self._mean_cache) > 8192:
                self._mean_cache.clear()
            dummy_m = np.zeros(rec.n)
            cached = self.fitted.predict(individual_design(self.blocks, a, dummy_m, rec))
            self._mean_cache[key] = cached
        return cached

    def pdf(self, a, m, rec: ClusterRecord) -> np.ndarray:
        z = (np.asarray(m, dtype=float) - self.mean(a, rec)) / self.sigma
        return _norm_pdf(z) / self.sigma

    def cdf(self, a, m, rec: ClusterRecord) -> np.ndarray:
        return ndtr((np.asarray(m, dtype=float) - self.mean(a, rec)) / self.sigma)

    def ppf(self, a, u, rec: ClusterRecord) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=float), _Z_EPS, 1.0 - _Z_EPS)
        return self.mean(a, rec) + self.sigma * ndtri(u)

    def from_latent(self, a, z, rec: ClusterRecord) -> np.ndarray:
        return self.mean(a, rec) + self.sigma * np.asarray(z, dtype=float)


@dataclass
class MediatorMarginalBinary:
    """Conditional probability model for a binary (0/1) mediator."""

    fitted: _FittedMean
    blocks: tuple[str, ...]
    support: tuple[float, float] = (0.0, 1.0)

    def prob_one(self, a, rec: ClusterRecord) -> np.ndarray:
        dummy_m = np.zeros(rec.n)
        return self.fitted.predict(individual_design(self.blocks, a, dummy_m, rec))

    def pdf(self, a, m, rec: ClusterRecord) -> np.ndarray:
        p = self.prob_one(a, rec)
        m = np.asarray(m, dtype=float)
        return p * m + (1.0 - p) * (1.0 - m)

    def cdf(self, a, m, rec: ClusterRecord) -> np.ndarray:
        p = self.prob_one(a, rec)
        m = np.asarray(m, dtype=float)
        return np.where(m < 0.0, 0.0, np.where(m < 1.0, 1.0 - p, 1.0))

    def ppf(self, a, u, rec: ClusterRecord) -> np.ndarray:
        p = self.prob_one(a, rec)
        return (np.asarray(u, dtype=float) > 1.0 - p).astype(float)


@dataclass
class MediatorConditionalGaussian:
    """Gaussian model for one member's mediator given the other members' mediators.

    Falls back to the marginal model for singleton clusters, where conditioning
    on an empty set is the marginal by definition.
    """

    fitted: _FittedMean | None
    blocks: tuple[str, ...]
    sigma: float
    marginal: MediatorMarginalGaussian

    def mean_one(self, a, m, rec: ClusterRecord, j: int) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        design = individual_design(self.blocks, a, m, rec)[..., j, :]
        return self.fitted.predict(design)

    def pdf(self, a, m, rec: ClusterRecord, j: int) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        if rec.n == 1 or self.fitted is None:
            return self.marginal.pdf(a, m, rec)[..., j]
        z = (m[..., j] - self.mean_one(a, m, rec, j)) / self.sigma
        return _norm_pdf(z) / self.sigma


@dataclass
class CopulaModel:
    """Exchangeable normal-scores dependence between within-cluster mediators.

    A single correlation ``rho`` describes every pair of latent scores; the
    marginal model maps mediators to latent scores through its CDF.
    """

    rho: float
    marginal: MediatorMarginalGaussian
    loglik: float = 0.0
    n_max: int = 2

    def latent(self, a, m, rec: ClusterRecord) -> np.ndarray:
        u = np.clip(self.marginal.cdf(a, m, rec), _Z_EPS, 1.0 - _Z_EPS)
        return ndtri(u)


@dataclass
class PropensityModel:
    """Cluster-level model for the probability of each arm given mediators and covariates."""

    fitted: _FittedMean
    blocks: tuple[str, ...]

    def __call__(self, a, m, rec: ClusterRecord) -> np.ndarray:
        p1 = self.fitted.predict(cluster_design(self.blocks, m, rec))
        return p1 if a == 1 else 1.0 - p1


@dataclass
class EtaStarModel:
    """Cross-arm mean of the outcome regression: for each member, the expectation
    of ``eta(a, M, C, N)`` over mediators drawn in arm ``a_star``."""

    fitted_by_arm: dict[int, _FittedMean]
    blocks: tuple[str, ...]

    def __call__(self, a, a_star, rec: ClusterRecord) -> np.ndarray:
        dummy_m = np.zeros(rec.n)
        design = individual_design(self.blocks, a_star, dummy_m, rec)
        return self.fitted_by_arm[a].predict(design)


@dataclass
class EtaDaggerModel:
    """Own-mediator-conditional cross-arm mean used by the reparameterized scores.

    For the pair (a, a_star) this estimates, as a function of one member's own
    mediator value, the arm-``a_star`` expectation of ``eta(a, M, C, N)`` times
    the marginal-to-conditional density ratio at arm ``a_star``; that ratio
    converts draws of the remaining mediators from their conditional law into
    draws from their marginal law.
    """

    fitted_by_pair: dict[tuple[int, int], _FittedMean]
    blocks: tuple[str, ...]

    def __call__(self, a, a_star, m_own, rec: ClusterRecord, j: int) -> np.ndarray:
        key = (int(a), int(a_star))
        if key not in self.fitted_by_pair:
            raise ValueError(f"eta_dagger was not fitted for arm pair {key}")
        design = individual_design_one(self.blocks, a_star, m_own, rec, j)
        return self.fitted_by_pair[key].predict(design)

    def all_members(self, a, a_star, m, rec: ClusterRecord) -> np.ndarray:
        """Evaluate every member at its own column of ``m`` in one pass; (..., n)."""
        key = (int(a), int(a_star))
        if key not in self.fitted_by_pair:
            raise ValueError(f"eta_dagger was not fitted for arm pair {key}")
        design = individual_design(self.blocks, a_star, m, rec)
        return self.fitted_by_pair[key].predict(design)


# ----------------------------------------------------------------------------
# The pluggable bundle.
# ----------------------------------------------------------------------------

_MEMBERS = (
    "eta",
    "kappa_j",
    "kappa_j_cdf",
    "kappa_j_ppf",
    "kappa_joint",
    "kappa_minus_j",
    "kappa_cond_j",
    "propensity",
    "eta_star",
    "eta_dagger",
)

REQUIRES = {
    "mf": ("eta", "kappa_joint", "kappa_j", "kappa_minus_j"),
    "eif1": ("eta", "kappa_joint", "kappa_j", "kappa_minus_j"),
    "eif2": ("eta", "propensity", "kappa_j", "kappa_cond_j", "eta_star", "eta_dagger"),
}


@dataclass
class NuisanceSet:
    """Bundle of fitted (or injected) nuisance evaluators.

    Members left as None are simply unavailable; estimators check
    availability up front via :meth:`require`. ``rho`` and the marginal
    CDF/quantile members drive mediator sampling for Monte Carlo integration;
    ``support`` is set for finite-support mediators, in which case all
    integrals are exact sums.
    """

    eta: Callable | None = None
    kappa_j: Callable | None = None
    kappa_j_cdf: Callable | None = None
    kappa_j_ppf: Callable | None = None
    kappa_joint: Callable | None = None
    kappa_minus_j: Callable | None = None
    kappa_cond_j: Callable | None = None
    propensity: Callable | None = None
    eta_star: Callable | None = None
    eta_dagger: Callable | None = None
    rho: float | None = None
    support: tuple[float, ...] | None = None
    diagnostics: dict = field(default_factory=dict)
    # Optional shortcut mapping standard-normal latent scores straight to
    # mediator values (equals kappa_j_ppf of the normal CDF, but avoids the
    # quantile round trip for location-scale marginals).
    kappa_j_latent: Callable | None = None
    # Optional batched eta_dagger over all members at once: (a, a_star,
    # m (..., n), rec) -> (..., n), member j evaluated at its own column.
    eta_dagger_all: Callable | None = None
    # Handles on the fitted model objects (set by fit_nuisances); these let
    # the scorer evaluate whole trials with stacked designs instead of
    # cluster-by-cluster calls. Absent for injected nuisances.
    models: dict | None = None

    @property
    def available(self) -> frozenset[str]:
        return frozenset(name for name in _MEMBERS if getattr(self, name) is not None)

    def require(self, *names: str):
        missing = [name for name in names if getattr(self, name) is None]
        if missing:
            raise ValueError(f"nuisance set is missing required members: {missing}")


# ----------------------------------------------------------------------------
# Fitting operations.
# ----------------------------------------------------------------------------


def fit_glm_backend(eps: float = 0.01) -> GlmBackend:
    return GlmBackend(clip=eps)


ALL_BLOCKS = ("treat", "m_own", "m_loo", "singleton", "x_own", "x_loo", "v", "n")


class _TrialDesign:
    """One stacked individual-level design shared by every nuisance fit.

    Rows are individuals in cluster order; every possible block is present,
    and each working model selects its columns. The treatment column can be
    overridden to evaluate fitted regressions at counterfactual arms.
    """

    def __init__(self, clusters):
        if isinstance(clusters, Trial):
            clusters = clusters.clusters
        self.clusters = tuple(clusters)
        rows = [individual_design(ALL_BLOCKS, rec.a, rec.m, rec) for rec in self.clusters]
        self.full = np.vstack(rows)
        self.y = np.concatenate([rec.y for rec in self.clusters])
        self.m = np.concatenate([rec.m for rec in self.clusters])
        self.sizes = np.concatenate([np.full(rec.n, rec.n) for rec in self.clusters])
        counts = np.array([rec.n for rec in self.clusters])
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.cluster_sizes = counts
        rec0 = self.clusters[0]
        spans: dict[str, list[int]] = {}
        col = 0
        for name in ALL_BLOCKS:
            width = _block_width(name, rec0)
            spans[name] = list(range(col, col + width))
            col += width
        self.spans = spans

    def columns(self, blocks: Sequence[str]) -> np.ndarray:
        idx = [i for name in blocks for i in self.spans[name]]
        return self.full[:, idx]

    def block_position(self, blocks: Sequence[str], target: str) -> int:
        pos = 0
        for name in blocks:
            if name == target:
                return pos
            pos += len(self.spans[name])
        raise KeyError(target)

    def columns_at_arm(self, blocks: Sequence[str], a: int) -> np.ndarray:
        out = self.columns(blocks).copy()
        if "treat" in blocks:
            out[:, self.block_position(blocks, "treat")] = float(a)
        return out

    def cluster_means(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.starts) / self.cluster_sizes


def _design_for(trial: Trial, design: _TrialDesign | None) -> _TrialDesign:
    return design if design is not None else _TrialDesign(trial)


def fit_outcome_model(
    trial: Trial,
    cfg: SummaryConfig,
    backend="parametric",
    blocks: Sequence[str] = ETA_BLOCKS,
    family: str = "gaussian",
    eps: float = 0.01,
    design: _TrialDesign | None = None,
) -> OutcomeModel:
    """One pooled individual-level regression of outcomes on arm, mediator and covariates."""
    backend = _resolve_backend(backend, trial, eps)
    blocks = _apply_summary(blocks, cfg)
    design = _design_for(trial, design)
    names = _block_names(blocks, trial.clusters[0])
    fitted = _fit_mean(backend, design.columns(blocks), design.y, family, names)
    return OutcomeModel(fitted=fitted, blocks=tuple(blocks), family=family)


def _apply_summary(blocks: Sequence[str], cfg: SummaryConfig) -> tuple[str, ...]:
    out = []
    for b in blocks:
        if b == "m_loo" and cfg.mediator_summary != "own_loo":
            continue
        if b == "x_loo" and cfg.covariate_summary != "own_loo":
            continue
        if b == "n" and not cfg.include_n:
            continue
        out.append(b)
    return tuple(out)


def fit_marginal_mediator(
    trial: Trial,
    cfg: SummaryConfig,
    backend="parametric",
    blocks: Sequence[str] = KAPPA_BLOCKS,
    eps: float = 0.01,
    design: _TrialDesign | None = None,
):
    """Marginal mediator model: gaussian for continuous support, logit for binary."""
    backend = _resolve_backend(backend, trial, eps)
    blocks = _apply_summary(blocks, cfg)
    design = _design_for(trial, design)
    x, y = design.columns(blocks), design.m
    names = _block_names(blocks, trial.clusters[0])
    if trial.mediator_support is None:
        fitted = _fit_mean(backend, x, y, "gaussian", names)
        sigma = float(getattr(fitted.model, "residual_sd", 0.0))
        return MediatorMarginalGaussian(fitted=fitted, blocks=tuple(blocks), sigma=sigma)
    if set(trial.mediator_support) != {0.0, 1.0}:
        raise ValueError(
            "fitted finite-support mediator models are implemented for 0/1 support only; "
            "use injected nuisances for general finite supports"
        )
    fitted = _fit_mean(backend, x, y, "binomial", names)
    return MediatorMarginalBinary(fitted=fitted, blocks=tuple(blocks))


def _golden_max(fun: Callable[[float], float], lo: float, hi: float, tol: float = 1e-8) -> float:
    """Golden-section maximizer on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    while abs(b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def fit_copula(trial: Trial, marginal: MediatorMarginalGaussian, tol: float = 1e-8) -> CopulaModel:
    """Estimate the exchangeable latent correlation by pseudo-likelihood.

    Observed mediators are mapped to latent normal scores through the fitted
    marginal CDF; the correlation maximizes the exchangeable multivariate
    normal log-likelihood of those scores, by golden-section search over the
    valid interval. Singleton clusters carry no pairwise information and drop
    out of the objective.
    """
    if trial.mediator_support is not None:
        raise ValueError("the normal-scores dependence model requires a continuous mediator")
    by_size: dict[int, list[np.ndarray]] = {}
    for rec in trial.clusters:
        u = np.clip(marginal.cdf(rec.a, rec.m, rec), _Z_EPS, 1.0 - _Z_EPS)
        by_size.setdefault(rec.n, []).append(ndtri(u))
    stacked = {n: np.vstack(zs) for n, zs in by_size.items() if n > 1}
    n_max = max(by_size)
    if not stacked:
        warnings.warn("all clusters are singletons; latent correlation set to 0", RuntimeWarning)
        return CopulaModel(rho=0.0, marginal=marginal, loglik=0.0, n_max=n_max)

    def loglik(rho: float) -> float:
        total = 0.0
        for n, z in stacked.items():
            total += float(np.sum(exch_copula_logdensity(z, rho)))
        return total

    lo = exch_rho_lower(n_max) + 1e-9
    hi = 1.0 - 1e-9
    rho = _golden_max(loglik, lo, hi, tol=tol)
    return CopulaModel(rho=float(rho), marginal=marginal, loglik=loglik(rho), n_max=n_max)


def copula_densities(cop: CopulaModel) -> tuple[Callable, Callable, Callable]:
    """Joint, drop-one-member, and one-given-rest mediator densities from a copula model.

    These satisfy ``joint = cond * minus_j`` exactly: dropping one coordinate
    of an exchangeable normal leaves an exchangeable normal with the same
    correlation, and the conditional of one score given the rest is gaussian
    in closed form.
    """
    marginal = cop.marginal
    rho = cop.rho

    def kappa_joint(a, m, rec: ClusterRecord) -> np.ndarray:
        if rec.n > 1:
            _check_rho(rho, rec.n)
        pdfs = marginal.pdf(a, m, rec)
        z = cop.latent(a, m, rec)
        return np.exp(exch_copula_logdensity(z, rho) + np.sum(np.log(pdfs), axis=-1))

    def kappa_minus_j(a, m, rec: ClusterRecord, j: int) -> np.ndarray:
        if rec.n == 1:
            m = np.asarray(m, dtype=float)
            return np.ones(m.shape[:-1])
        keep = [l for l in range(rec.n) if l != j]
        pdfs = marginal.pdf(a, m, rec)[..., keep]
        z = cop.latent(a, m, rec)[..., keep]
        return np.exp(exch_copula_logdensity(z, rho) + np.sum(np.log(pdfs), axis=-1))

    def kappa_cond_j(a, m, rec: ClusterRecord, j: int) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        pdf_j = marginal.pdf(a, m, rec)[..., j]
        if rec.n == 1:
            return pdf_j
        z = cop.latent(a, m, rec)
        keep = [l for l in range(rec.n) if l != j]
        mean, var = exch_conditional(z[..., keep], rec.n, rho)
        zj = z[..., j]
        sd = np.sqrt(var)
        cond_latent = _norm_pdf((zj - mean) / sd) / sd
        return cond_latent * pdf_j / _norm_pdf(zj)

    return kappa_joint, kappa_minus_j, kappa_cond_j


def fit_propensity(
    trial: Trial,
    cfg: SummaryConfig,
    backend="parametric",
    blocks: Sequence[str] = PROPENSITY_BLOCKS,
    eps: float = 0.01,
) -> PropensityModel:
    """Cluster-level regression of the arm indicator on mediator/covariate summaries."""
    backend = _resolve_backend(backend, trial, eps)
    xs = np.vstack([cluster_design(blocks, rec.m, rec) for rec in trial.clusters])
    ys = np.array([float(rec.a) for rec in trial.clusters])
    names = _block_names(blocks, trial.clusters[0])
    fitted = _fit_mean(backend, xs, ys, "binomial", names)
    return PropensityModel(fitted=fitted, blocks=tuple(blocks))


def fit_conditional_mediator(
    trial: Trial,
    cfg: SummaryConfig,
    marginal: MediatorMarginalGaussian,
    backend="parametric",
    blocks: Sequence[str] = COND_BLOCKS,
    eps: float = 0.01,
    design: _TrialDesign | None = None,
) -> MediatorConditionalGaussian:
    """Model for one mediator given the others: marginal features plus their leave-one-out mean."""
    backend = _resolve_backend(backend, trial, eps)
    blocks = _apply_summary(blocks, cfg)
    design = _design_for(trial, design)
    multi = design.sizes > 1
    if not multi.any():
        return MediatorConditionalGaussian(None, tuple(blocks), 1.0, marginal)
    names = _block_names(blocks, trial.clusters[0])
    fitted = _fit_mean(
        backend, design.columns(blocks)[multi], design.m[multi], "gaussian", names
    )
    sigma = float(getattr(fitted.model, "residual_sd", 0.0))
    if not sigma > 0:
        raise ValueError("conditional mediator model has nonpositive residual sd")
    return MediatorConditionalGaussian(fitted, tuple(blocks), sigma, marginal)


def fit_eta_star(
    trial: Trial,
    eta: OutcomeModel,
    cfg: SummaryConfig,
    backend="parametric",
    blocks: Sequence[str] = ETA_STAR_BLOCKS,
    eps: float = 0.01,
    design: _TrialDesign | None = None,
) -> EtaStarModel:
    """Sequential regression: project eta(a, observed mediators) on arm and covariates.

    Predicting the fit at arm ``a_star`` estimates the arm-``a_star`` mean of
    ``eta(a, M, C, N)`` given covariates and size.
    """
    backend = _resolve_backend(backend, trial, eps)
    blocks = _apply_summary(blocks, cfg)
    design = _design_for(trial, design)
    names = _block_names(blocks, trial.clusters[0])
    x = design.columns(blocks)
    fitted_by_arm = {}
    for a in (0, 1):
        y = eta.fitted.predict(design.columns_at_arm(eta.blocks, a))
        fitted_by_arm[a] = _fit_mean(backend, x, y, "gaussian", names)
    return EtaStarModel(fitted_by_arm=fitted_by_arm, blocks=tuple(blocks))


def fit_eta_dagger(
    trial: Trial,
    eta: OutcomeModel,
    marginal,
    cond: MediatorConditionalGaussian | None,
    cfg: SummaryConfig,
    backend="parametric",
    pairs: Sequence[tuple[int, int]] = ((1, 0),),
    blocks: Sequence[str] = ETA_DAGGER_BLOCKS,
    eps: float = 0.01,
    ratio_max: float | None = None,
    design: _TrialDesign | None = None,
) -> EtaDaggerModel:
    """Sequential regression for the own-mediator-conditional cross-arm mean.

    For each arm pair (a, a_star), regress
    ``eta(a, M) * kappa_j(a_star, M_j) / kappa_cond_j(a_star, M)`` on arm, the
    own mediator and covariates; predicting at arm ``a_star`` gives the
    integral of ``eta(a, .)`` over the other members' arm-``a_star`` marginal
    law with the own mediator held fixed. Density ratios are clipped.
    """
    backend = _resolve_backend(backend, trial, eps)
    blocks = _apply_summary(blocks, cfg)
    design = _design_for(trial, design)
    names = _block_names(blocks, trial.clusters[0])
    if ratio_max is None:
        ratio_max = 1.0 / eps
    x = design.columns(blocks)
    fitted_by_pair = {}
    for a, a_star in pairs:
        eta_vals = eta.fitted.predict(design.columns_at_arm(eta.blocks, a))
        if cond is None or cond.fitted is None:
            ratio = np.ones(design.m.size)
        else:
            mu_num = marginal.fitted.predict(
                design.columns_at_arm(marginal.blocks, a_star)
            )
            num = _norm_pdf((design.m - mu_num) / marginal.sigma) / marginal.sigma
            mu_den = cond.fitted.predict(design.columns_at_arm(cond.blocks, a_star))
            den = _norm_pdf((design.m - mu_den) / cond.sigma) / cond.sigma
            ratio = np.clip(num / np.clip(den, 1e-300, None), 0.0, ratio_max)
            ratio[design.sizes == 1] = 1.0  # own-given-rest equals the marginal
        fitted_by_pair[(int(a), int(a_star))] = _fit_mean(
            backend, x, eta_vals * ratio, "gaussian", names
        )
    return EtaDaggerModel(fitted_by_pair=fitted_by_pair, blocks=tuple(blocks))


def fit_nuisances(
    trial: Trial,
    cfg: SummaryConfig = SummaryConfig(),
    backend: str = "parametric",
    misspec: Misspecification | None = None,
    needs: Sequence[str] = ("eif1", "eif2"),
    eta_dagger_pairs: Sequence[tuple[int, int]] = ((1, 0),),
    eps: float = 0.01,
    outcome_family: str = "gaussian",
) -> NuisanceSet:
    """Fit every nuisance required by the requested estimator families.

    ``backend`` selects parametric working models or the flexible spline
    learner; ``misspec`` deliberately corrupts chosen working models for
    robustness studies. All families share one set of fits so that derived
    effect decompositions stay coherent.
    """
    trial.require_both_arms()
    ms = misspec or Misspecification()
    resolved = _resolve_backend(backend, trial, eps)
    need_members = set()
    for fam in needs:
        need_members.update(REQUIRES[fam])

    design = _TrialDesign(trial)
    eta = fit_outcome_model(
        trial, cfg, resolved, blocks=ms.eta_blocks(), family=outcome_family, eps=eps,
        design=design,
    )
    marginal = fit_marginal_mediator(
        trial, cfg, resolved, blocks=ms.kappa_blocks(), eps=eps, design=design
    )
    diagnostics: dict = {"backend": backend, "misspec": ms != Misspecification()}

    out = NuisanceSet(
        eta=eta,
        kappa_j=marginal.pdf,
        kappa_j_cdf=marginal.cdf,
        kappa_j_ppf=marginal.ppf,
        kappa_j_latent=getattr(marginal, "from_latent", None),
        support=trial.mediator_support,
        diagnostics=diagnostics,
    )

    if trial.mediator_support is None:
        cop = fit_copula(trial, marginal)
        rho = cop.rho if ms.force_rho is None else float(ms.force_rho)
        if ms.force_rho is not None:
            cop = replace(cop, rho=rho)
        joint, minus_j, cond_copula = copula_densities(cop)
        out.rho = rho
        out.kappa_joint = joint
        out.kappa_minus_j = minus_j
        diagnostics["rho"] = rho
    else:
        # No dependence model for finite support: the joint is the product of
        # the per-member marginals, so one-given-rest equals the marginal.
        out.rho = 0.0

        def joint(a, m, rec, _pdf=marginal.pdf):
            return np.prod(_pdf(a, m, rec), axis=-1)

        def minus_j(a, m, rec, j, _pdf=marginal.pdf):
            pdfs = _pdf(a, m, rec)
            keep = [l for l in range(rec.n) if l != j]
            if not keep:
                return np.ones(np.asarray(m, dtype=float).shape[:-1])
            return np.prod(pdfs[..., keep], axis=-1)

        out.kappa_joint = joint
        out.kappa_minus_j = minus_j

    if "eif2" in needs:
        out.propensity = fit_propensity(
            trial, cfg, resolved, blocks=ms.propensity_blocks(), eps=eps
        )
        if trial.mediator_support is None:
            cond = fit_conditional_mediator(
                trial, cfg, marginal, resolved, blocks=ms.cond_blocks(), eps=eps,
                design=design,
            )
            out.kappa_cond_j = cond.pdf
        else:
            cond = None
            out.kappa_cond_j = lambda a, m, rec, j: marginal.pdf(a, m, rec)[..., j]
        out.eta_star = fit_eta_star(trial, eta, cfg, resolved, eps=eps, design=design)
        dagger = fit_eta_dagger(
            trial, eta, marginal, cond, cfg, resolved, pairs=eta_dagger_pairs, eps=eps,
            design=design,
        )
        out.eta_dagger = dagger
        out.eta_dagger_all = dagger.all_members
        out.models = {
            "eta": eta,
            "marginal": marginal,
            "cond": cond,
            "propensity": out.propensity,
            "eta_star": out.eta_star,
            "eta_dagger": dagger,
        }
    out.require(*need_members)
    return out
