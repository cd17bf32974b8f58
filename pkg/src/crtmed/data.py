"""Clustered-trial data model: records, CSV ingestion, summary features, folds, resampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "TrialDataError",
    "ClusterRecord",
    "Trial",
    "SummaryConfig",
    "EffectScale",
    "load_trial",
    "trial_to_frame",
    "build_features",
    "feature_names",
    "split_folds",
    "resample_clusters",
]


class TrialDataError(ValueError):
    """Raised when input data violate the clustered-trial contract."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ClusterRecord:
    """One cluster: size, covariates, treatment, mediators, outcomes.

    Arrays are stored read-only, so records can be shared freely across
    workers (bootstrap replicates hold references, not copies).

    Parameters
    ----------
    id : str
        Opaque cluster label.
    n : int
        Cluster size (number of individuals), at least 1.
    v : ndarray, shape (d_v,)
        Cluster-level covariates.
    x : ndarray, shape (n, d_x)
        Individual-level covariates, one row per member.
    a : int
        Cluster-level treatment arm, 0 or 1.
    m : ndarray, shape (n,)
        Mediator values.
    y : ndarray, shape (n,)
        Outcome values.
    """

    id: str
    n: int
    v: np.ndarray
    x: np.ndarray
    a: int
    m: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise TrialDataError(f"cluster {self.id!r}: size must be >= 1, got {self.n}")
        if self.a not in (0, 1):
            raise TrialDataError(f"cluster {self.id!r}: treatment must be 0 or 1, got {self.a!r}")
        v = _readonly(np.atleast_1d(self.v))
        x = _readonly(np.atleast_2d(self.x)) if np.size(self.x) else _readonly(np.zeros((self.n, 0)))
        m = _readonly(self.m)
        y = _readonly(self.y)
        if m.shape != (self.n,) or y.shape != (self.n,):
            raise TrialDataError(
                f"cluster {self.id!r}: mediator/outcome lengths {m.shape[0]}/{y.shape[0]} "
                f"do not match size {self.n}"
            )
        if x.shape[0] != self.n:
            raise TrialDataError(
                f"cluster {self.id!r}: covariate rows {x.shape[0]} do not match size {self.n}"
            )
        for name, arr in (("v", v), ("x", x), ("m", m), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise TrialDataError(f"cluster {self.id!r}: non-finite values in {name}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", int(self.a))
        object.__setattr__(self, "n", int(self.n))

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_v(self) -> int:
        return self.v.shape[0]


@dataclass(frozen=True)
class Trial:
    """A cluster-randomized trial: immutable collection of clusters plus design info.

    ``pi`` is the known randomization probability; it is supplied by the
    analyst and never estimated. ``mediator_support`` is None for continuous
    mediators or the tuple of attainable values for finite-support mediators.
    """

    clusters: tuple[ClusterRecord, ...]
    pi: float
    mediator_support: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if len(self.clusters) < 2:
            raise TrialDataError(f"need at least 2 clusters, got {len(self.clusters)}")
        # pi = 1 is tolerated for generated data (degenerate assignment); any
        # estimation call still requires both arms, which such trials fail.
        if not 0.0 < self.pi <= 1.0:
            raise TrialDataError(f"randomization probability must be in (0,1], got {self.pi}")
        if self.mediator_support is not None:
            support = tuple(float(s) for s in self.mediator_support)
            if len(support) < 2:
                raise TrialDataError("finite mediator support needs at least 2 values")
            object.__setattr__(self, "mediator_support", support)

    @property
    def k(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([rec.n for rec in self.clusters])

    @property
    def nbar(self) -> float:
        return float(np.mean(self.sizes))

    @property
    def n_treated(self) -> int:
        return sum(rec.a for rec in self.clusters)

    def require_both_arms(self):
        if self.n_treated in (0, self.k):
            raise TrialDataError("estimation requires at least one treated and one control cluster")


@dataclass(frozen=True)
class SummaryConfig:
    """How to collapse variable-length within-cluster information into fixed features.

    ``own_loo`` expands a per-individual variable into (own value, leave-one-out
    mean of the rest); ``own`` keeps only the own value. For singleton clusters
    the leave-one-out mean is defined as 0 and a singleton indicator column is
    always carried so the feature dimension never depends on cluster size.
    """

    mediator_summary: str = "own_loo"
    covariate_summary: str = "own_loo"
    include_n: bool = True

    def __post_init__(self):
        for field_name in ("mediator_summary", "covariate_summary"):
            rule = getattr(self, field_name)
            if rule not in ("own_loo", "own"):
                raise ValueError(f"{field_name} must be 'own_loo' or 'own', got {rule!r}")


@dataclass(frozen=True)
class EffectScale:
    """Effect measure scale: mean difference, risk ratio, or odds ratio."""

    kind: str = "difference"

    def __post_init__(self):
        if self.kind not in ("difference", "ratio", "odds_ratio"):
            raise ValueError(f"unknown scale {self.kind!r}")

    @property
    def identity(self) -> float:
        """Value of g(x, x): 0 on the difference scale, 1 on ratio scales."""
        return 0.0 if self.kind == "difference" else 1.0

    def g(self, x: float, y: float) -> float:
        if self.kind == "difference":
            return float(x - y)
        if self.kind == "ratio":
            if x <= 0 or y <= 0:
                raise ValueError(f"ratio scale needs positive components, got ({x}, {y})")
            return float(x / y)
        for val in (x, y):
            if not 0.0 < val < 1.0:
                raise ValueError(f"odds-ratio scale needs components in (0,1), got ({x}, {y})")
        return float((x / (1 - x)) / (y / (1 - y)))


def _loo_mean(values: np.ndarray) -> np.ndarray:
    """Leave-one-out means along the last axis; 0 for length-1 axes."""
    n = values.shape[-1]
    if n == 1:
        return np.zeros_like(values)
    total = values.sum(axis=-1, keepdims=True)
    return (total - values) / (n - 1)


def build_features(rec: ClusterRecord, j: int, cfg: SummaryConfig) -> np.ndarray:
    """Fixed-length feature vector for individual ``j`` (0-based) of a cluster.

    Layout: mediator block, singleton flag, covariate block, cluster
    covariates, and optionally the cluster size.
    """
    if not 0 <= j < rec.n:
        raise IndexError(f"individual index {j} out of range for cluster of size {rec.n}")
    parts = [np.array([rec.m[j]])]
    if cfg.mediator_summary == "own_loo":
        parts.append(np.array([_loo_mean(rec.m)[j]]))
    parts.append(np.array([1.0 if rec.n == 1 else 0.0]))
    parts.append(rec.x[j])
    if cfg.covariate_summary == "own_loo":
        if rec.n == 1:
            parts.append(np.zeros(rec.d_x))
        else:
            parts.append((rec.x.sum(axis=0) - rec.x[j]) / (rec.n - 1))
    parts.append(rec.v)
    if cfg.include_n:
        parts.append(np.array([float(rec.n)]))
    return np.concatenate(parts)


def feature_names(cfg: SummaryConfig, d_x: int, d_v: int) -> list[str]:
    """Column names matching the layout of :func:`build_features`."""
    names = ["m_own"]
    if cfg.mediator_summary == "own_loo":
        names.append("m_loo")
    names.append("singleton")
    names += [f"x_own{k}" for k in range(d_x)]
    if cfg.covariate_summary == "own_loo":
        names += [f"x_loo{k}" for k in range(d_x)]
    names += [f"v{k}" for k in range(d_v)]
    if cfg.include_n:
        names.append("n")
    return names


DEFAULT_SCHEMA: dict = {
    "cluster_id": "cluster_id",
    "treatment": "treatment",
    "mediator": "mediator",
    "outcome": "outcome",
    "cluster_covariates": [],
    "individual_covariates": [],
}


def _resolve_schema(schema: Mapping | None) -> dict:
    out = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(DEFAULT_SCHEMA)
        if unknown:
            raise TrialDataError(f"unknown schema keys: {sorted(unknown)}")
        out.update(schema)
    return out


def load_trial(
    path,
    schema: Mapping | None = None,
    pi: float = 0.5,
    mediator_support: Sequence[float] | None = None,
) -> Trial:
    """Read a long-format CSV (one row per individual) into a validated Trial.

    Clusters are grouped by the id column, preserving order of first
    appearance. Rows must be complete; the treatment must be 0/1 and constant
    within each cluster, and cluster-level covariates must not vary within a
    cluster.
    """
    if not 0.0 < pi < 1.0:
        raise TrialDataError(f"analysis requires a randomization probability in (0,1), got {pi}")
    schema = _resolve_schema(schema)
    frame = pd.read_csv(path)
    needed = (
        [schema["cluster_id"], schema["treatment"], schema["mediator"], schema["outcome"]]
        + list(schema["cluster_covariates"])
        + list(schema["individual_covariates"])
    )
    missing_cols = [c for c in needed if c not in frame.columns]
    if missing_cols:
        raise TrialDataError(f"missing columns: {missing_cols}")
    null_mask = frame[needed].isna()
    if null_mask.any().any():
        row = int(null_mask.any(axis=1).idxmax())
        raise TrialDataError(f"missing value at row {row}; complete cases are required")

    ids = frame[schema["cluster_id"]].astype(str)
    clusters = []
    for cid in pd.unique(ids):
        sub = frame[ids == cid]
        treat = sub[schema["treatment"]].unique()
        if len(treat) != 1:
            raise TrialDataError(f"inconsistent treatment within cluster {cid!r}")
        a = treat[0]
        if a not in (0, 1):
            raise TrialDataError(f"cluster {cid!r}: treatment must be 0 or 1, got {a!r}")
        v_parts = []
        for col in schema["cluster_covariates"]:
            vals = sub[col].unique()
            if len(vals) != 1:
                raise TrialDataError(f"cluster covariate {col!r} varies within cluster {cid!r}")
            v_parts.append(float(vals[0]))
        x = sub[list(schema["individual_covariates"])].to_numpy(dtype=float)
        clusters.append(
            ClusterRecord(
                id=str(cid),
                n=len(sub),
                v=np.array(v_parts),
                x=x if x.size else np.zeros((len(sub), 0)),
                a=int(a),
                m=sub[schema["mediator"]].to_numpy(dtype=float),
                y=sub[schema["outcome"]].to_numpy(dtype=float),
            )
        )
    return Trial(clusters=tuple(clusters), pi=pi, mediator_support=mediator_support)


def trial_to_frame(trial: Trial, schema: Mapping | None = None) -> pd.DataFrame:
    """Flatten a Trial back to the long-format layout used by :func:`load_trial`."""
    schema = _resolve_schema(schema)
    rows = []
    for rec in trial.clusters:
        for j in range(rec.n):
            row = {
                schema["cluster_id"]: rec.id,
                schema["treatment"]: rec.a,
                schema["mediator"]: rec.m[j],
                schema["outcome"]: rec.y[j],
            }
            for k, col in enumerate(schema["cluster_covariates"]):
                row[col] = rec.v[k]
            for k, col in enumerate(schema["individual_covariates"]):
                row[col] = rec.x[j, k]
            rows.append(row)
    return pd.DataFrame(rows)


def split_folds(trial: Trial, folds: int, seed: int) -> np.ndarray:
    """Assign each cluster to one of ``folds`` folds, sizes differing by at most 1.

    The split is always at cluster level and is deterministic given the seed.
    """
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if folds > trial.k:
        raise ValueError(f"cannot split {trial.k} clusters into {folds} folds")
    order = np.random.default_rng(seed).permutation(trial.k)
    assignment = np.empty(trial.k, dtype=int)
    assignment[order] = np.arange(trial.k) % folds
    return assignment


def resample_clusters(trial: Trial, seed: int) -> Trial:
    """Nonparametric cluster bootstrap draw: K whole clusters sampled with replacement."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, trial.k, size=trial.k)
    return Trial(
        clusters=tuple(trial.clusters[i] for i in idx),
        pi=trial.pi,
        mediator_support=trial.mediator_support,
    )
