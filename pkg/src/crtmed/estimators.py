"""Point estimation of the mediation estimands and their effect decompositions.

Two average potential-outcome functionals are estimated, each under
cluster-average (equal cluster weights) and individual-average (cluster-size
weights) versions:

``theta(a, a_star)``
    mean outcome with the arm set to ``a`` and every mediator drawn from its
    arm-``a_star`` law;
``tau``
    mean outcome in the treated arm with each member's own mediator from the
    treated law and the other members' mediators from the control law.

Three estimator families share the same nuisance fits. ``mf`` plugs fitted
regressions into the identification integrals. ``eif1`` and ``eif2`` average
per-cluster scores built from an inverse-probability-weighted residual term,
an opposite-arm centering term, and a plug-in term; being influence-function
based, they are consistent when either of two separate model groups is
correct. Cross-fitting (fit out-of-fold, score in-fold) is used with the
flexible learner backend. Optional stabilization renormalizes each weighted
term by the empirical mean of its weight, which leaves the asymptotics
unchanged but tames variable weights in small samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import EffectScale, SummaryConfig, Trial, split_folds
from .integrate import DEFAULT_CONTRASTS, AuxEvaluator, IntegrationPlan
from .nuisance import Misspecification, NuisanceSet, fit_nuisances

__all__ = [
    "EstimatorSpec",
    "ClusterScore",
    "PointEstimates",
    "EffectTable",
    "EstimateResult",
    "cluster_scores",
    "stabilize",
    "scores_to_points",
    "estimate_mf",
    "estimate_eif",
    "estimate",
    "assemble_effects",
    "EFFECTS",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator to run: family, nuisance backend, stabilization, integration."""

    family: str = "eif1"
    backend: str = "parametric"
    stabilized: bool = False
    folds: int = 5
    integration: IntegrationPlan = field(default_factory=IntegrationPlan)
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("mf", "eif1", "eif2"):
            raise ValueError(f"unknown estimator family {self.family!r}")
        if self.backend not in ("parametric", "ml"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.family == "mf":
            if self.stabilized:
                raise ValueError("the plug-in family has no stabilized variant")
            if self.backend != "parametric":
                raise ValueError("the plug-in family uses parametric working models")
        if self.backend == "ml" and self.folds < 2:
            raise ValueError("cross-fitting requires at least 2 folds")

    @property
    def label(self) -> str:
        if self.family == "mf":
            return "mf-par"
        suffix = "s" if self.stabilized else "ns"
        backend = "par" if self.backend == "parametric" else "ml"
        return f"{self.family}-{backend}-{suffix}"


@dataclass
class ThetaTerms:
    """Per-cluster pieces of one theta-contrast score, weights kept separate."""

    w_resid: float   # arm indicator over its probability, times the density ratio
    resid: float     # mean outcome residual at arm a
    w_center: float  # opposite-arm indicator over its probability
    center: float    # mean of eta minus its integral
    plugin: float    # mean of the integral term

    def psi(self) -> float:
        return self.w_resid * self.resid + self.w_center * self.center + self.plugin


@dataclass
class TauTerms:
    """Per-cluster pieces of the cross-world score.

    ``resid_term`` is already weighted (the weight varies by member), so
    stabilization rescales the whole term by the mean of ``resid_weight``.
    """

    resid_term: float
    resid_weight: float
    w_own: float
    own: float
    w_other: float
    other: float
    plugin: float

    def psi(self) -> float:
        return self.resid_term + self.w_own * self.own + self.w_other * self.other + self.plugin


@dataclass
class ClusterScore:
    """Score contributions of one cluster for all requested contrasts."""

    n: int
    theta: dict[tuple[int, int], ThetaTerms]
    tau: TauTerms

    def psi_theta(self, contrast: tuple[int, int]) -> float:
        return self.theta[contrast].psi()

    def psi_tau(self) -> float:
        return self.tau.psi()


@dataclass
class PointEstimates:
    """Point estimates for every estimand, cluster- and individual-averaged."""

    theta_c: dict[tuple[int, int], float]
    theta_i: dict[tuple[int, int], float]
    tau_c: float
    tau_i: float
    nbar: float

    def as_dict(self) -> dict:
        out = {}
        for (a, a_star), val in self.theta_c.items():
            out[f"theta_c({a},{a_star})"] = val
        for (a, a_star), val in self.theta_i.items():
            out[f"theta_i({a},{a_star})"] = val
        out["tau_c"] = self.tau_c
        out["tau_i"] = self.tau_i
        return out


def _pifac(pi: float, a: int) -> float:
    return pi if a == 1 else 1.0 - pi


def cluster_scores(
    trial: Trial,
    aux: AuxEvaluator,
    contrasts: Sequence[tuple[int, int]] = DEFAULT_CONTRASTS,
) -> list[ClusterScore]:
    """Evaluate the per-cluster scores for each theta contrast and for tau.

    Each theta score combines a weighted outcome-residual term (nonzero only
    in the arm being predicted), a centering term in the mediator-law arm, and
    the plug-in integral. The tau score has residual, own-mediator and
    other-mediator terms, each centered at the cross-world integral.
    """
    return _scores_for(trial.clusters, trial.pi, aux, contrasts)


def _scores_for(recs, pi, aux, contrasts) -> list[ClusterScore]:
    scores = []
    for rec in recs:
        ing = aux.score_ingredients(rec, contrasts=contrasts)
        theta = {}
        for (a, a_star) in contrasts:
            ind_a = 1.0 if rec.a == a else 0.0
            ind_s = 1.0 if rec.a == a_star else 0.0
            u1 = ing.u1[(a, a_star)]
            theta[(a, a_star)] = ThetaTerms(
                w_resid=ind_a / _pifac(pi, a) * ing.w1[(a, a_star)],
                resid=float(np.mean(rec.y - ing.eta_obs[a])),
                w_center=ind_s / _pifac(pi, a_star),
                center=float(np.mean(ing.eta_obs[a] - u1)),
                plugin=float(np.mean(u1)),
            )
        ind1 = 1.0 if rec.a == 1 else 0.0
        ind0 = 1.0 - ind1
        tau = TauTerms(
            resid_term=float(
                ind1 / pi * np.mean(ing.w2_obs * (rec.y - ing.eta_obs[1]))
            ),
            resid_weight=float(ind1 / pi * np.mean(ing.w2_obs)),
            w_own=ind1 / pi,
            own=float(np.mean(ing.u2_obs - ing.u4_110)),
            w_other=ind0 / (1.0 - pi),
            other=float(np.mean(ing.u3_obs - ing.u4_110)),
            plugin=float(np.mean(ing.u4_110)),
        )
        scores.append(ClusterScore(n=rec.n, theta=theta, tau=tau))
    return scores


def _fast_eif2_scores(
    recs,
    pi: float,
    ns,
    plan: IntegrationPlan,
    contrasts,
    w_max: float = 50.0,
    nodes_tail: float = 1e-10,
):
    """Trial-level vectorized scoring for the reparameterized family.

    All integrals in this parameterization are direct regression predictions
    or one-dimensional quadratures, so the whole trial can be scored with a
    handful of stacked matrix products instead of per-cluster calls. Only
    applies to fitted continuous-mediator parametric or spline models;
    returns None otherwise and the caller falls back to the generic path.

    Produces exactly the same scores as the per-cluster evaluator.
    """
    from .nuisance import _TrialDesign, _norm_pdf
    from scipy.special import ndtri

    models = ns.models
    if models is None or ns.support is not None:
        return None
    marginal = models["marginal"]
    if not hasattr(marginal, "sigma"):
        return None
    eta_m, star, dagger = models["eta"], models["eta_star"], models["eta_dagger"]
    cond, prop = models["cond"], models["propensity"]
    if (1, 0) not in dagger.fitted_by_pair:
        return None

    design = _TrialDesign(recs)
    y = design.y
    m = design.m
    sizes = design.cluster_sizes
    arm = np.array([rec.a for rec in design.clusters], dtype=float)
    clip_events = 0

    eta_obs = {a: eta_m.fitted.predict(design.columns_at_arm(eta_m.blocks, a)) for a in (0, 1)}
    u1 = {
        (a, s): star.fitted_by_arm[a].predict(design.columns_at_arm(star.blocks, s))
        for (a, s) in contrasts
    }
    u2 = dagger.fitted_by_pair[(1, 0)].predict(design.columns_at_arm(dagger.blocks, 0))

    mu = {a: marginal.fitted.predict(design.columns_at_arm(marginal.blocks, a)) for a in (0, 1)}
    sigma = marginal.sigma

    # scalar quadrature against the treated-arm marginal, one rule per person
    x_gl, w_gl = np.polynomial.legendre.leggauss(plan.nodes)
    uq = (x_gl + 1.0) / 2.0
    wq = w_gl / 2.0
    half_width = sigma * ndtri(1.0 - nodes_tail)
    lo = mu[1] - half_width
    nodes = lo + (2.0 * half_width) * uq[:, None]
    node_w = wq[:, None] * (2.0 * half_width) * _norm_pdf((nodes - mu[1]) / sigma) / sigma

    def tensor_predict(fitted, base, m_pos):
        stacked = np.broadcast_to(base, (plan.nodes,) + base.shape).copy()
        stacked[:, :, m_pos] = nodes
        return fitted.predict(stacked)

    base_eta1 = design.columns_at_arm(eta_m.blocks, 1)
    u3 = np.einsum(
        "qi,qi->i",
        node_w,
        tensor_predict(eta_m.fitted, base_eta1, design.block_position(eta_m.blocks, "m_own")),
    )
    base_dag0 = design.columns_at_arm(dagger.blocks, 0)
    u4 = np.einsum(
        "qi,qi->i",
        node_w,
        tensor_predict(dagger.fitted_by_pair[(1, 0)], base_dag0,
                       design.block_position(dagger.blocks, "m_own")),
    )

    # assignment probabilities at the observed mediators, one row per cluster
    from .nuisance import cluster_design

    prop_design = np.vstack(
        [cluster_design(prop.blocks, rec.m, rec) for rec in design.clusters]
    )
    p1 = prop.fitted.predict(prop_design)
    pifac = {1: pi, 0: 1.0 - pi}
    s_at = {1: p1, 0: 1.0 - p1}
    w1 = {}
    for (a, a_star) in contrasts:
        if a == a_star:
            w1[(a, a_star)] = np.ones(len(design.clusters))
        else:
            raw = s_at[a_star] / s_at[a] * (pifac[a] / pifac[a_star])
            clip_events += int(np.sum(raw > w_max))
            w1[(a, a_star)] = np.clip(raw, 0.0, w_max)

    kj1 = _norm_pdf((m - mu[1]) / sigma) / sigma
    if cond is not None and cond.fitted is not None:
        mu_c0 = cond.fitted.predict(design.columns_at_arm(cond.blocks, 0))
        den = _norm_pdf((m - mu_c0) / cond.sigma) / cond.sigma
        single = design.sizes == 1
        if single.any():
            den[single] = (_norm_pdf((m - mu[0]) / sigma) / sigma)[single]
    else:
        den = _norm_pdf((m - mu[0]) / sigma) / sigma
    s_rows0 = np.repeat(1.0 - p1, sizes)
    s_rows1 = np.repeat(p1, sizes)
    bad = den == 0.0
    if np.any(bad & (kj1 == 0.0)):
        raise ValueError("undefined 0/0 density ratio")
    with np.errstate(divide="ignore"):
        ratio = np.where(bad, np.inf, kj1 / np.where(bad, 1.0, den))
    w2_raw = ratio * (s_rows0 / s_rows1) * (pi / (1.0 - pi))
    clip_events += int(np.sum(w2_raw > w_max) + np.sum(bad))
    w2 = np.clip(w2_raw, 0.0, w_max)

    means = design.cluster_means
    resid = {a: means(y - eta_obs[a]) for a in (0, 1)}
    ind = {a: (arm == a).astype(float) for a in (0, 1)}
    theta_parts = {}
    for c in contrasts:
        a, a_star = c
        theta_parts[c] = (
            ind[a] / pifac[a] * w1[c],
            resid[a],
            ind[a_star] / pifac[a_star],
            means(eta_obs[a] - u1[c]),
            means(u1[c]),
        )
    tau_resid_term = ind[1] / pi * means(w2 * (y - eta_obs[1]))
    tau_resid_weight = ind[1] / pi * means(w2)
    tau_own = means(u2 - u4)
    tau_other = means(u3 - u4)
    tau_plug = means(u4)

    scores = []
    for i, rec in enumerate(design.clusters):
        theta = {
            c: ThetaTerms(
                w_resid=float(theta_parts[c][0][i]),
                resid=float(theta_parts[c][1][i]),
                w_center=float(theta_parts[c][2][i]),
                center=float(theta_parts[c][3][i]),
                plugin=float(theta_parts[c][4][i]),
            )
            for c in contrasts
        }
        tau = TauTerms(
            resid_term=float(tau_resid_term[i]),
            resid_weight=float(tau_resid_weight[i]),
            w_own=float(ind[1][i] / pi),
            own=float(tau_own[i]),
            w_other=float(ind[0][i] / (1.0 - pi)),
            other=float(tau_other[i]),
            plugin=float(tau_plug[i]),
        )
        scores.append(ClusterScore(n=rec.n, theta=theta, tau=tau))
    return scores, clip_events


def stabilize(scores: Sequence[ClusterScore], trial: Trial) -> list[ClusterScore]:
    """Renormalize every weighted score term by the empirical mean of its weight.

    The population mean of each weight is 1, so this is a no-op
    asymptotically (and exactly a no-op when the empirical means are 1), but
    it removes the sensitivity of the scores to a common rescaling of the
    weights. Applied separately per contrast and per term.
    """
    del trial  # weights already encode the design; kept for signature clarity
    if not scores:
        return []
    contrasts = list(scores[0].theta)
    norms_resid = {}
    norms_center = {}
    for c in contrasts:
        norms_resid[c] = float(np.mean([s.theta[c].w_resid for s in scores]))
        norms_center[c] = float(np.mean([s.theta[c].w_center for s in scores]))
    n_rw = float(np.mean([s.tau.resid_weight for s in scores]))
    n_own = float(np.mean([s.tau.w_own for s in scores]))
    n_oth = float(np.mean([s.tau.w_other for s in scores]))
    for name, val in [("residual", n_rw), ("own", n_own), ("other", n_oth)] + [
        (f"theta{c}", norms_resid[c]) for c in contrasts
    ] + [(f"center{c}", norms_center[c]) for c in contrasts]:
        if val <= 0:
            raise ValueError(f"empirical weight mean for the {name} term is not positive")
    out = []
    for s in scores:
        theta = {
            c: replace(
                s.theta[c],
                w_resid=s.theta[c].w_resid / norms_resid[c],
                w_center=s.theta[c].w_center / norms_center[c],
            )
            for c in contrasts
        }
        tau = replace(
            s.tau,
            resid_term=s.tau.resid_term / n_rw,
            resid_weight=s.tau.resid_weight / n_rw,
            w_own=s.tau.w_own / n_own,
            w_other=s.tau.w_other / n_oth,
        )
        out.append(ClusterScore(n=s.n, theta=theta, tau=tau))
    return out


def scores_to_points(scores: Sequence[ClusterScore]) -> PointEstimates:
    """Average per-cluster scores into cluster- and individual-weighted estimates."""
    sizes = np.array([s.n for s in scores], dtype=float)
    nbar = float(sizes.mean())
    size_w = sizes / nbar
    contrasts = list(scores[0].theta)
    theta_c, theta_i = {}, {}
    for c in contrasts:
        psi = np.array([s.psi_theta(c) for s in scores])
        theta_c[c] = float(psi.mean())
        theta_i[c] = float(np.mean(size_w * psi))
    psi_tau = np.array([s.psi_tau() for s in scores])
    return PointEstimates(
        theta_c=theta_c,
        theta_i=theta_i,
        tau_c=float(psi_tau.mean()),
        tau_i=float(np.mean(size_w * psi_tau)),
        nbar=nbar,
    )


def estimate_mf(
    trial: Trial,
    nuisances: NuisanceSet,
    plan: IntegrationPlan,
    contrasts: Sequence[tuple[int, int]] = DEFAULT_CONTRASTS,
) -> PointEstimates:
    """Plug-in estimation: average the per-member identification integrals."""
    nuisances.require("eta", "kappa_joint", "kappa_j", "kappa_minus_j")
    aux = AuxEvaluator(nuisances, plan, parameterization="eif1", pi=trial.pi)
    sizes = trial.sizes.astype(float)
    nbar = float(sizes.mean())
    per_cluster_theta = {c: [] for c in contrasts}
    per_cluster_tau = []
    for rec in trial.clusters:
        for c in contrasts:
            per_cluster_theta[c].append(aux.u1(c[0], c[1], rec))
        per_cluster_tau.append(aux.u4(1, 1, 0, rec))
    theta_c, theta_i = {}, {}
    for c in contrasts:
        means = np.array([vals.mean() for vals in per_cluster_theta[c]])
        sums = np.array([vals.sum() for vals in per_cluster_theta[c]])
        theta_c[c] = float(means.mean())
        theta_i[c] = float(sums.sum() / (trial.k * nbar))
    tau_means = np.array([vals.mean() for vals in per_cluster_tau])
    tau_sums = np.array([vals.sum() for vals in per_cluster_tau])
    return PointEstimates(
        theta_c=theta_c,
        theta_i=theta_i,
        tau_c=float(tau_means.mean()),
        tau_i=float(tau_sums.sum() / (trial.k * nbar)),
        nbar=nbar,
    )


@dataclass
class EstimateResult:
    """Point estimates plus the per-cluster scores and run diagnostics."""

    spec: EstimatorSpec
    points: PointEstimates
    scores: list[ClusterScore] | None
    diagnostics: dict


def _fit_for(trial, spec, cfg, misspec, needs):
    return fit_nuisances(
        trial,
        cfg=cfg,
        backend=spec.backend,
        misspec=misspec,
        needs=needs,
    )


def estimate_eif(
    trial: Trial,
    spec: EstimatorSpec,
    cfg: SummaryConfig = SummaryConfig(),
    misspec: Misspecification | None = None,
    nuisances: NuisanceSet | None = None,
    contrasts: Sequence[tuple[int, int]] = DEFAULT_CONTRASTS,
) -> EstimateResult:
    """Score-based estimation, cross-fitted when the flexible backend is used.

    With the parametric backend, nuisances are fitted once on the full data.
    With the flexible backend, clusters are split into folds; each fold is
    scored with nuisances fitted on the remaining folds, and all scores are
    averaged together. Passing ``nuisances`` skips fitting entirely (used to
    inject exact nuisances in tests).
    """
    if spec.family not in ("eif1", "eif2"):
        raise ValueError("estimate_eif handles the score-based families only")
    trial.require_both_arms()
    diagnostics: dict = {"estimator": spec.label}
    needs = (spec.family,)

    if nuisances is not None or spec.backend == "parametric":
        fitted = nuisances or _fit_for(trial, spec, cfg, misspec, needs)
        fast = (
            _fast_eif2_scores(trial.clusters, trial.pi, fitted, spec.integration, tuple(contrasts))
            if spec.family == "eif2"
            else None
        )
        if fast is not None:
            scores, clip_events = fast
            diagnostics["clip_events"] = clip_events
        else:
            aux = AuxEvaluator(
                fitted, spec.integration, parameterization=spec.family, pi=trial.pi
            )
            scores = cluster_scores(trial, aux, contrasts=contrasts)
            diagnostics["clip_events"] = aux.clip_events
        diagnostics["rho"] = fitted.rho
    else:
        folds = split_folds(trial, spec.folds, seed=spec.seed)
        diagnostics["fold_map"] = {
            rec.id: int(f) for rec, f in zip(trial.clusters, folds)
        }
        arms = np.array([rec.a for rec in trial.clusters])
        for f in sorted(set(folds)):
            if len(set(arms[folds != f])) < 2:
                raise ValueError(
                    "a training fold contains a single treatment arm; use fewer folds"
                )
        scores = [None] * trial.k
        clip_events = 0
        for f in sorted(set(folds)):
            train_ids = np.flatnonzero(folds != f)
            test_ids = np.flatnonzero(folds == f)
            train = Trial(
                clusters=tuple(trial.clusters[i] for i in train_ids),
                pi=trial.pi,
                mediator_support=trial.mediator_support,
            )
            fitted = _fit_for(train, spec, cfg, misspec, needs)
            test_recs = [trial.clusters[i] for i in test_ids]
            fast = (
                _fast_eif2_scores(test_recs, trial.pi, fitted, spec.integration, tuple(contrasts))
                if spec.family == "eif2"
                else None
            )
            if fast is not None:
                fold_scores, fold_clips = fast
                clip_events += fold_clips
            else:
                aux = AuxEvaluator(
                    fitted, spec.integration, parameterization=spec.family, pi=trial.pi
                )
                fold_scores = _scores_for(test_recs, trial.pi, aux, contrasts)
                clip_events += aux.clip_events
            for pos, i in enumerate(test_ids):
                scores[i] = fold_scores[pos]
        diagnostics["clip_events"] = clip_events

    if spec.stabilized:
        scores = stabilize(scores, trial)
    points = scores_to_points(scores)
    return EstimateResult(spec=spec, points=points, scores=scores, diagnostics=diagnostics)


def estimate(
    trial: Trial,
    spec: EstimatorSpec,
    cfg: SummaryConfig = SummaryConfig(),
    misspec: Misspecification | None = None,
    nuisances: NuisanceSet | None = None,
    contrasts: Sequence[tuple[int, int]] = DEFAULT_CONTRASTS,
) -> EstimateResult:
    """Run any estimator family on a trial and return points, scores and diagnostics."""
    if spec.family == "mf":
        trial.require_both_arms()
        fitted = nuisances or fit_nuisances(
            trial, cfg=cfg, backend=spec.backend, misspec=misspec, needs=("mf",)
        )
        points = estimate_mf(trial, fitted, spec.integration, contrasts=contrasts)
        return EstimateResult(
            spec=spec,
            points=points,
            scores=None,
            diagnostics={"estimator": spec.label, "rho": fitted.rho},
        )
    return estimate_eif(
        trial, spec, cfg=cfg, misspec=misspec, nuisances=nuisances, contrasts=contrasts
    )


# ----------------------------------------------------------------------------
# Effect decompositions.
# ----------------------------------------------------------------------------

# Each effect contrasts two estimands; references are either a theta contrast
# or the cross-world mean tau.
EFFECTS: dict[str, tuple] = {
    "te": ((1, 1), (0, 0)),
    "nie": ((1, 1), (1, 0)),
    "nde": ((1, 0), (0, 0)),
    "sme": ((1, 1), "tau"),
    "ime": ("tau", (1, 0)),
}


@dataclass
class EffectTable:
    """Total, direct and mediated effects on a chosen scale, for both weightings.

    The composite effects are built from their components (the total effect
    as indirect plus direct, the indirect as spillover plus individual on the
    difference scale, products on ratio scales), so the decomposition
    identities hold exactly by construction.
    """

    scale: EffectScale
    effects: dict[str, float]
    points: PointEstimates

    def as_dict(self) -> dict:
        return dict(self.effects)


def _component(points: PointEstimates, ref, weighting: str) -> float:
    table = points.theta_c if weighting == "c" else points.theta_i
    if ref == "tau":
        return points.tau_c if weighting == "c" else points.tau_i
    return table[ref]


def assemble_effects(points: PointEstimates, scale: EffectScale) -> EffectTable:
    """Derive the effect decomposition from point estimates on the requested scale."""
    effects: dict[str, float] = {}
    for weighting in ("c", "i"):
        sme = scale.g(
            _component(points, (1, 1), weighting), _component(points, "tau", weighting)
        )
        ime = scale.g(
            _component(points, "tau", weighting), _component(points, (1, 0), weighting)
        )
        nde = scale.g(
            _component(points, (1, 0), weighting), _component(points, (0, 0), weighting)
        )
        if scale.kind == "difference":
            nie = sme + ime
            te = nie + nde
        else:
            nie = sme * ime
            te = nie * nde
        effects[f"sme_{weighting}"] = sme
        effects[f"ime_{weighting}"] = ime
        effects[f"nde_{weighting}"] = nde
        effects[f"nie_{weighting}"] = nie
        effects[f"te_{weighting}"] = te
    return EffectTable(scale=scale, effects=effects, points=points)
