"""Standard errors and confidence intervals for estimands and derived effects.

Two routes are provided. The nonparametric cluster bootstrap resamples whole
clusters with replacement and re-runs the entire estimation (nuisance fits
included) per replicate, reading percentile intervals off the replicate
distribution. The influence-function route uses the empirical variance of the
per-cluster scores, with effects handled by linearity on the difference scale
and by the delta method on ratio scales.

By convention the bootstrap is the default for parametric fits and the score
variance for cross-fitted flexible fits, but either can be requested for
either backend.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .data import EffectScale, SummaryConfig, Trial, resample_clusters
from .estimators import (
    EFFECTS,
    ClusterScore,
    EstimateResult,
    EstimatorSpec,
    PointEstimates,
    assemble_effects,
    estimate,
)

__all__ = [
    "InferenceSpec",
    "IntervalEstimate",
    "eif_variance",
    "effect_intervals",
    "bootstrap_effects",
    "estimate_with_intervals",
]

_MAX_ATTEMPTS = 5


@dataclass(frozen=True)
class InferenceSpec:
    """How to build intervals: cluster bootstrap or empirical score variance."""

    method: str = "auto"
    b: int = 1000
    seed: int = 0
    level: float = 0.95

    def __post_init__(self):
        if self.method not in ("auto", "cluster_bootstrap", "eif_variance"):
            raise ValueError(f"unknown inference method {self.method!r}")
        if self.b < 100:
            raise ValueError(f"need at least 100 bootstrap replicates, got {self.b}")
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"level must be in (0,1), got {self.level}")

    def resolve(self, spec: EstimatorSpec) -> str:
        if self.method != "auto":
            return self.method
        return "eif_variance" if spec.backend == "ml" else "cluster_bootstrap"


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    se: float
    lower: float
    upper: float
    method: str

    def as_dict(self) -> dict:
        return {
            "point": self.point,
            "se": self.se,
            "lower": self.lower,
            "upper": self.upper,
            "method": self.method,
        }


def _score_matrix(scores: Sequence[ClusterScore]) -> tuple[dict, np.ndarray]:
    contrasts = list(scores[0].theta)
    psi = {c: np.array([s.psi_theta(c) for s in scores]) for c in contrasts}
    psi["tau"] = np.array([s.psi_tau() for s in scores])
    sizes = np.array([s.n for s in scores], dtype=float)
    return psi, sizes


def _deviations(points: PointEstimates, scores: Sequence[ClusterScore]) -> dict:
    """Per-cluster influence deviations for every estimand.

    Cluster-averaged estimands use the raw score deviation; individual-
    averaged estimands scale the deviation by cluster size over the mean
    size.
    """
    psi, sizes = _score_matrix(scores)
    nbar = sizes.mean()
    devs = {}
    for c, vals in psi.items():
        if c == "tau":
            devs["tau_c"] = vals - points.tau_c
            devs["tau_i"] = (sizes / nbar) * (vals - points.tau_i)
        else:
            devs[f"theta_c({c[0]},{c[1]})"] = vals - points.theta_c[c]
            devs[f"theta_i({c[0]},{c[1]})"] = (sizes / nbar) * (vals - points.theta_i[c])
    return devs


def _wald(point: float, var: float, level: float, method: str) -> IntervalEstimate:
    se = math.sqrt(max(var, 0.0))
    z = float(ndtri(0.5 + level / 2.0))
    return IntervalEstimate(point, se, point - z * se, point + z * se, method)


def eif_variance(
    scores: Sequence[ClusterScore],
    points: PointEstimates,
    level: float = 0.95,
) -> dict[str, IntervalEstimate]:
    """Wald intervals from the empirical variance of the per-cluster scores."""
    if len(scores) < 2:
        raise ValueError("score variance needs at least 2 clusters")
    k = len(scores)
    devs = _deviations(points, scores)
    out = {}
    for name, dev in devs.items():
        var = float(np.sum(dev**2)) / k**2
        point = points.as_dict()[name]
        out[name] = _wald(point, var, level, "eif_variance")
    return out


def _effect_gradient(scale: EffectScale, x: float, y: float, g: float) -> tuple[float, float]:
    if scale.kind == "difference":
        return 1.0, -1.0
    if scale.kind == "ratio":
        return 1.0 / y, -x / y**2
    return g / (x * (1.0 - x)), -g / (y * (1.0 - y))


def effect_intervals(
    points: PointEstimates,
    scores: Sequence[ClusterScore],
    scale: EffectScale,
    level: float = 0.95,
) -> dict[str, IntervalEstimate]:
    """Intervals for every effect from the score deviations.

    On the difference scale the effect influence is the difference of the
    component influences; on ratio scales the component influences are
    combined through the first-order gradient of the effect.
    """
    if len(scores) < 2:
        raise ValueError("score variance needs at least 2 clusters")
    k = len(scores)
    devs = _deviations(points, scores)
    table = assemble_effects(points, scale)
    pts_map = points.as_dict()
    out = {}

    def ref_key(ref, weighting):
        if ref == "tau":
            return f"tau_{weighting}"
        return f"theta_{weighting}({ref[0]},{ref[1]})"

    for weighting in ("c", "i"):
        for name, (ref_x, ref_y) in EFFECTS.items():
            kx, ky = ref_key(ref_x, weighting), ref_key(ref_y, weighting)
            x, y = pts_map[kx], pts_map[ky]
            g = table.effects[f"{name}_{weighting}"]
            gx, gy = _effect_gradient(scale, x, y, g)
            dev = gx * devs[kx] + gy * devs[ky]
            var = float(np.sum(dev**2)) / k**2
            out[f"{name}_{weighting}"] = _wald(g, var, level, "eif_variance")
    return out


# ----------------------------------------------------------------------------
# Cluster bootstrap.
# ----------------------------------------------------------------------------


def _replicate_seed(seed: int, b: int, attempt: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(b, attempt))
    return int(ss.generate_state(1)[0] % 2**31)


def _one_replicate(trial, spec, inf, scale, cfg, misspec, b):
    """One bootstrap replicate, redrawing on estimation failure."""
    last_exc = None
    for attempt in range(_MAX_ATTEMPTS):
        seed = _replicate_seed(inf.seed, b, attempt)
        boot = resample_clusters(trial, seed)
        try:
            res = estimate(boot, spec, cfg=cfg, misspec=misspec)
        except Exception as exc:  # noqa: BLE001 - resamples can be degenerate
            last_exc = exc
            continue
        values = res.points.as_dict()
        values.update(assemble_effects(res.points, scale).effects)
        return values, attempt
    raise RuntimeError(
        f"bootstrap replicate {b} failed after {_MAX_ATTEMPTS} redraws: {last_exc}"
    )


def bootstrap_effects(
    trial: Trial,
    spec: EstimatorSpec,
    inf: InferenceSpec,
    scale: EffectScale = EffectScale("difference"),
    cfg: SummaryConfig = SummaryConfig(),
    misspec=None,
    base: EstimateResult | None = None,
    threads: int = 1,
) -> tuple[EstimateResult, dict[str, IntervalEstimate], dict]:
    """Percentile intervals from full re-estimation on cluster resamples.

    Replicates that fail (for example a single-arm resample) are redrawn with
    fresh seeds, up to 5 attempts each; the redraw count is reported and a
    warning is raised when more than 10% of replicates needed one.
    """
    if base is None:
        base = estimate(trial, spec, cfg=cfg, misspec=misspec)
    base_values = base.points.as_dict()
    base_values.update(assemble_effects(base.points, scale).effects)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(
                    lambda b: _one_replicate(trial, spec, inf, scale, cfg, misspec, b),
                    range(inf.b),
                )
            )
    else:
        results = [
            _one_replicate(trial, spec, inf, scale, cfg, misspec, b) for b in range(inf.b)
        ]
    redraws = sum(attempt for _, attempt in results)
    if redraws > 0.1 * inf.b:
        warnings.warn(
            f"{redraws} bootstrap redraws over {inf.b} replicates", RuntimeWarning
        )
    lo_q = (1.0 - inf.level) / 2.0
    hi_q = 1.0 - lo_q
    intervals = {}
    for name, point in base_values.items():
        draws = np.array([vals[name] for vals, _ in results])
        draws.sort()
        intervals[name] = IntervalEstimate(
            point=point,
            se=float(draws.std(ddof=1)),
            lower=float(np.quantile(draws, lo_q)),
            upper=float(np.quantile(draws, hi_q)),
            method="cluster_bootstrap",
        )
    return base, intervals, {"redraws": int(redraws), "replicates": inf.b}


def estimate_with_intervals(
    trial: Trial,
    spec: EstimatorSpec,
    inf: InferenceSpec,
    scale: EffectScale = EffectScale("difference"),
    cfg: SummaryConfig = SummaryConfig(),
    misspec=None,
    threads: int = 1,
) -> tuple[EstimateResult, dict[str, IntervalEstimate]]:
    """Point estimates plus intervals for every estimand and effect."""
    if spec.stabilized and spec.backend == "ml" and trial.k < 50:
        warnings.warn(
            "stabilized cross-fitted estimators can be anti-conservative with "
            f"few clusters (K={trial.k})",
            RuntimeWarning,
        )
    method = inf.resolve(spec)
    if method == "eif_variance":
        res = estimate(trial, spec, cfg=cfg, misspec=misspec)
        if res.scores is None:
            raise ValueError(
                "score-variance intervals need per-cluster scores; "
                "use the cluster bootstrap for the plug-in family"
            )
        intervals = eif_variance(res.scores, res.points, inf.level)
        intervals.update(effect_intervals(res.points, res.scores, scale, inf.level))
        res.diagnostics["inference"] = {"method": method}
        return res, intervals
    res, intervals, diag = bootstrap_effects(
        trial, spec, inf, scale, cfg=cfg, misspec=misspec, threads=threads
    )
    res.diagnostics["inference"] = {"method": "cluster_bootstrap", **diag}
    return res, intervals
