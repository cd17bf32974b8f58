"""Regression backends: an IRLS-fitted GLM and a penalized spline learner.

Both expose the same minimal surface (``fit`` returning an object with
``predict``), so nuisance models can swap between a parametric working model
and a flexible learner without touching anything downstream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline
from scipy.special import expit

__all__ = [
    "GlmModel",
    "fit_glm",
    "SplineRidgeModel",
    "SplineRidgeBackend",
    "GlmBackend",
]

MAX_ITER = 100
COEF_TOL = 1e-8


def _check_design(x: np.ndarray, names: Sequence[str]):
    """Reject rank-deficient designs, naming the redundant columns."""
    if x.shape[0] < x.shape[1]:
        raise ValueError(
            f"need more rows ({x.shape[0]}) than free coefficients ({x.shape[1]}) to fit"
        )
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(x.shape) * np.finfo(float).eps if diag[0] > 0 else 0.0
    rank = int(np.sum(diag > tol))
    if rank < x.shape[1]:
        bad = sorted(names[i] for i in piv[rank:])
        raise ValueError(f"design matrix is rank deficient; collinear columns: {bad}")


@dataclass
class GlmModel:
    """A fitted generalized linear model (gaussian-identity or binomial-logit).

    ``coef`` includes the intercept in position 0 when the model was fitted
    with one. Binomial predictions are clipped into [clip, 1 - clip].
    """

    family: str
    coef: np.ndarray
    names: list[str]
    residual_sd: float
    add_intercept: bool
    converged: bool
    n_iter: int
    boundary: bool = False
    clip: float = 0.01

    def linpred(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.add_intercept:
            return self.coef[0] + x @ self.coef[1:]
        return x @ self.coef

    def predict(self, x: np.ndarray) -> np.ndarray:
        eta = self.linpred(x)
        if self.family == "gaussian":
            return eta
        return np.clip(expit(eta), self.clip, 1.0 - self.clip)


def fit_glm(
    x: np.ndarray,
    y: np.ndarray,
    family: str = "gaussian",
    weights: np.ndarray | None = None,
    names: Sequence[str] | None = None,
    add_intercept: bool = True,
    clip: float = 0.01,
) -> GlmModel:
    """Maximum likelihood fit by iteratively reweighted least squares.

    Gaussian-identity reduces to (weighted) least squares; binomial-logit
    iterates until the largest coefficient change falls below 1e-8 or 100
    iterations. Complete separation is handled by clipping predictions, with
    a converged-at-boundary warning.
    """
    if family not in ("gaussian", "binomial"):
        raise ValueError(f"unknown family {family!r}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ValueError("feature/response row counts differ")
    if family == "binomial" and not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("binomial responses must be 0/1")
    if names is None:
        names = [f"x{k}" for k in range(x.shape[1])]
    names = list(names)
    if add_intercept:
        x = np.column_stack([np.ones(x.shape[0]), x])
        names = ["intercept"] + names
    if weights is None:
        w = np.ones(x.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
    active = w > 0
    xa, ya, wa = x[active], y[active], w[active]
    _check_design(xa * np.sqrt(wa)[:, None], names)

    if family == "gaussian":
        sw = np.sqrt(wa)
        coef, *_ = np.linalg.lstsq(xa * sw[:, None], ya * sw, rcond=None)
        resid = ya - xa @ coef
        dof = max(xa.shape[0] - xa.shape[1], 1)
        residual_sd = float(np.sqrt(np.sum(wa * resid**2) / dof))
        return GlmModel(family, coef, names, residual_sd, add_intercept, True, 1, clip=clip)

    coef = np.zeros(xa.shape[1])
    converged = False
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        eta = xa @ coef
        mu = expit(eta)
        irls_w = wa * np.clip(mu * (1 - mu), 1e-10, None)
        z = eta + (ya - mu) / np.clip(mu * (1 - mu), 1e-10, None)
        sw = np.sqrt(irls_w)
        new, *_ = np.linalg.lstsq(xa * sw[:, None], z * sw, rcond=None)
        step = np.max(np.abs(new - coef))
        coef = new
        if step < COEF_TOL:
            converged = True
            break
    boundary = bool(np.max(np.abs(xa @ coef)) > 30.0)
    if boundary:
        warnings.warn(
            "logistic fit converged at boundary (separation); predictions are clipped",
            RuntimeWarning,
        )
    return GlmModel(
        family, coef, names, 0.0, add_intercept, converged or boundary, n_iter,
        boundary=boundary, clip=clip,
    )


# ----------------------------------------------------------------------------
# Flexible learner: per-feature cubic B-splines + pairwise interactions, ridge
# penalty chosen by generalized cross-validation.
# ----------------------------------------------------------------------------

LAMBDA_GRID = np.geomspace(1e-6, 1e3, 19)


def _spline_knots(col: np.ndarray, n_interior: int, degree: int) -> np.ndarray:
    lo, hi = float(np.min(col)), float(np.max(col))
    if hi <= lo:
        hi = lo + 1.0
    interior = np.quantile(col, np.linspace(0, 1, n_interior + 2)[1:-1]) if n_interior else np.array([])
    interior = np.unique(interior)
    return np.concatenate([[lo] * (degree + 1), interior, [hi] * (degree + 1)])


def _bspline_dense(x: np.ndarray, t: np.ndarray, k: int) -> np.ndarray:
    """Dense B-spline basis values at ``x`` for the clamped knot vector ``t``.

    Vectorized Cox-de Boor recursion; inputs outside the knot range are
    clamped, giving constant extrapolation of the boundary basis functions.
    Working arrays are kept row-contiguous, as this sits on the hot path of
    flexible-learner evaluation.
    """
    n_basis = t.size - k - 1
    x = np.clip(np.asarray(x, dtype=float).reshape(-1), t[k], t[n_basis])
    span = np.clip(t.searchsorted(x, side="right") - 1, k, n_basis - 1)
    rows = x.size
    values = np.zeros((k + 1, rows))
    values[0] = 1.0
    lefts = [x - t[span - j] for j in range(k)]
    rights = [t[span + j + 1] - x for j in range(k)]
    for j in range(1, k + 1):
        saved = np.zeros(rows)
        for r in range(j):
            denom = rights[r] + lefts[j - 1 - r]
            tmp = np.divide(values[r], denom, out=np.zeros(rows), where=denom > 0)
            values[r] = saved + rights[r] * tmp
            saved = lefts[j - 1 - r] * tmp
        values[j] = saved
    out = np.zeros((rows, n_basis))
    out[np.arange(rows)[:, None], (span - k)[:, None] + np.arange(k + 1)] = values.T
    return out


@dataclass
class _Basis:
    """Feature-to-basis expansion: splines on continuous columns, linear otherwise."""

    degree: int
    knots: list[np.ndarray | None]
    ranges: list[tuple[float, float]]
    interactions: bool

    def width(self, n_features: int) -> int:
        total = 1
        for t in self.knots:
            total += 1 if t is None else (t.size - self.degree - 2)
        if self.interactions:
            total += n_features * (n_features - 1) // 2
        return total

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rows, d = x.shape[0], x.shape[1]
        out = np.empty((rows, self.width(d)))
        out[:, 0] = 1.0
        col = 1
        for k in range(d):
            t = self.knots[k]
            if t is None:
                out[:, col] = np.clip(x[:, k], *self.ranges[k])
                col += 1
            else:
                basis = _bspline_dense(x[:, k], t, self.degree)
                width = basis.shape[1] - 1
                out[:, col : col + width] = basis[:, 1:]  # intercept absorbs one
                col += width
        if self.interactions:
            for i in range(d):
                for jj in range(i + 1, d):
                    out[:, col] = x[:, i] * x[:, jj]
                    col += 1
        return out


def _build_basis(x: np.ndarray, n_interior: int, degree: int, interactions: bool) -> _Basis:
    knots: list[np.ndarray | None] = []
    ranges = []
    for k in range(x.shape[1]):
        col = x[:, k]
        ranges.append((float(np.min(col)), float(np.max(col))))
        if np.unique(col).size <= 3:
            knots.append(None)
        else:
            knots.append(_spline_knots(col, n_interior, degree))
    basis = _Basis(degree, knots, ranges, interactions)
    return basis


def _gcv_ridge(
    b: np.ndarray, y: np.ndarray, w: np.ndarray | None = None
) -> tuple[np.ndarray, float]:
    """Weighted ridge solve over a lambda grid, picking the GCV winner.

    The intercept column (first) is unpenalized: columns and response are
    centered at their weighted means, the centered problem is solved by SVD,
    and the intercept is recovered from the means.
    """
    n = b.shape[0]
    if w is None:
        w = np.ones(n)
    wsum = w.sum()
    mean_b = (w @ b) / wsum
    mean_y = float(w @ y) / wsum
    sw = np.sqrt(w)
    bc = (b - mean_b)[:, 1:] * sw[:, None]
    yc = (y - mean_y) * sw
    u, d, vt = np.linalg.svd(bc, full_matrices=False)
    uy = u.T @ yc
    best = (np.inf, None, None)
    for lam in LAMBDA_GRID:
        shrink = d / (d**2 + lam)
        edf = float(np.sum(d**2 / (d**2 + lam))) + 1.0
        fitted = u @ (d * shrink * uy)
        rss = float(np.sum((yc - fitted) ** 2))
        denom = max(n - edf, 1.0)
        gcv = n * rss / denom**2
        if gcv < best[0]:
            best = (gcv, lam, shrink)
    _, lam, shrink = best
    beta_c = vt.T @ (shrink * uy)
    intercept = mean_y - mean_b[1:] @ beta_c
    return np.concatenate([[intercept], beta_c]), float(lam)


@dataclass
class SplineRidgeModel:
    """Fitted spline-basis ridge regression (gaussian) or penalized logistic."""

    family: str
    basis: _Basis
    coef: np.ndarray
    lam: float
    residual_sd: float
    clip: float = 0.01

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        eta = self.basis.transform(flat) @ self.coef
        eta = eta.reshape(x.shape[:-1])
        if self.family == "gaussian":
            return eta
        return np.clip(expit(eta), self.clip, 1.0 - self.clip)

    def feature_terms(self):
        """Coefficient layout: per-feature segments plus pairwise product terms.

        Returns (per_feature, pair_coefs) where per_feature[k] is
        (kind, coef_segment, knots, range) and pair_coefs maps feature index
        pairs to the coefficient of their raw product.
        """
        per_feature = []
        col = 1
        for k, t in enumerate(self.basis.knots):
            if t is None:
                per_feature.append(("linear", self.coef[col : col + 1], None, self.basis.ranges[k]))
                col += 1
            else:
                width = t.size - self.basis.degree - 2
                per_feature.append(("spline", self.coef[col : col + width], t, self.basis.ranges[k]))
                col += width
        pair_coefs = {}
        if self.basis.interactions:
            d = len(self.basis.knots)
            for i in range(d):
                for jj in range(i + 1, d):
                    pair_coefs[(i, jj)] = float(self.coef[col])
                    col += 1
        return per_feature, pair_coefs



def fit_spline_ridge(
    x: np.ndarray,
    y: np.ndarray,
    family: str = "gaussian",
    n_interior: int = 5,
    degree: int = 3,
    interactions: bool = True,
    clip: float = 0.01,
) -> SplineRidgeModel:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    basis = _build_basis(x, n_interior, degree, interactions)
    b = basis.transform(x)
    if family == "gaussian":
        coef, lam = _gcv_ridge(b, y)
        resid = y - b @ coef
        residual_sd = float(np.std(resid, ddof=1)) if y.size > 1 else 0.0
        return SplineRidgeModel(family, basis, coef, lam, residual_sd, clip)
    # Penalized IRLS: ridge solve of the working response each iteration, with
    # the penalty chosen by gaussian GCV on the final working problem.
    coef = np.zeros(b.shape[1])
    coef[0] = np.log(np.clip(y.mean(), 1e-6, 1 - 1e-6) / (1 - np.clip(y.mean(), 1e-6, 1 - 1e-6)))
    lam = 1.0
    for _ in range(25):
        eta = b @ coef
        mu = np.clip(expit(eta), 1e-6, 1 - 1e-6)
        w = mu * (1 - mu)
        z = eta + (y - mu) / w
        new, lam = _gcv_ridge(b, z, w=w)
        if np.max(np.abs(new - coef)) < 1e-6:
            coef = new
            break
        coef = new
    return SplineRidgeModel(family, basis, coef, lam, 0.0, clip)


# ----------------------------------------------------------------------------
# Backend objects: a uniform "fit mean model" interface.
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class GlmBackend:
    """Parametric working models: plain GLMs on the supplied features."""

    clip: float = 0.01

    def fit(self, x, y, family="gaussian", names=None, weights=None):
        return fit_glm(x, y, family=family, weights=weights, names=names, clip=self.clip)


@dataclass(frozen=True)
class SplineRidgeBackend:
    """Flexible learner: cubic spline expansions with GCV-tuned ridge shrinkage.

    ``knots_for`` follows a cube-root rule in the number of clusters, so the
    basis grows slowly with the sample.
    """

    n_clusters: int = 100
    interactions: bool = True
    clip: float = 0.01

    @property
    def n_interior(self) -> int:
        return int(np.ceil(self.n_clusters ** (1.0 / 3.0)))

    def fit(self, x, y, family="gaussian", names=None, weights=None):
        del names, weights  # basis construction ignores naming; weights unsupported
        return fit_spline_ridge(
            x, y, family=family, n_interior=self.n_interior,
            interactions=self.interactions, clip=self.clip,
        )
