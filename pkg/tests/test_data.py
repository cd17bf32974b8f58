import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crtmed.data import (
    ClusterRecord,
    EffectScale,
    SummaryConfig,
    Trial,
    TrialDataError,
    build_features,
    feature_names,
    load_trial,
    resample_clusters,
    split_folds,
    trial_to_frame,
)


def make_record(cid="c1", n=3, a=1, seed=0, d_x=1, d_v=1):
    rng = np.random.default_rng(seed)
    return ClusterRecord(
        id=cid,
        n=n,
        v=rng.normal(size=d_v),
        x=rng.normal(size=(n, d_x)),
        a=a,
        m=rng.normal(size=n),
        y=rng.normal(size=n),
    )


def make_trial(k=6, seed=0, sizes=(2, 3), pi=0.5):
    rng = np.random.default_rng(seed)
    clusters = []
    for i in range(k):
        n = int(rng.choice(sizes))
        clusters.append(make_record(cid=f"c{i}", n=n, a=i % 2, seed=seed + i))
    return Trial(clusters=tuple(clusters), pi=pi)


class TestClusterRecord:
    def test_basic_construction(self):
        rec = make_record()
        assert rec.n == 3
        assert rec.x.shape == (3, 1)
        assert not rec.m.flags.writeable

    def test_length_mismatch_rejected(self):
        with pytest.raises(TrialDataError, match="do not match size"):
            ClusterRecord(id="b", n=2, v=np.zeros(1), x=np.zeros((2, 1)),
                          a=0, m=np.zeros(3), y=np.zeros(2))

    def test_nonbinary_treatment_rejected(self):
        with pytest.raises(TrialDataError, match="treatment"):
            ClusterRecord(id="b", n=1, v=np.zeros(1), x=np.zeros((1, 1)),
                          a=2, m=np.zeros(1), y=np.zeros(1))


class TestLoadTrial:
    def test_two_clusters_of_three(self, tmp_path):
        rows = []
        for cid, a in (("alpha", 1), ("beta", 0)):
            for j in range(3):
                rows.append({"cluster_id": cid, "treatment": a, "mediator": j * 1.0,
                             "outcome": j + 0.5, "z": 0.1 * j})
        path = tmp_path / "t.csv"
        pd.DataFrame(rows).to_csv(path, index=False)
        trial = load_trial(path, schema={"individual_covariates": ["z"]}, pi=0.5)
        assert trial.k == 2
        assert list(trial.sizes) == [3, 3]
        assert trial.clusters[0].id == "alpha"
        assert trial.clusters[0].a == 1

    def test_inconsistent_treatment_names_cluster(self, tmp_path):
        frame = pd.DataFrame({
            "cluster_id": ["c1", "c1"], "treatment": [0, 1],
            "mediator": [1.0, 2.0], "outcome": [0.0, 0.0],
        })
        path = tmp_path / "t.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(TrialDataError, match="inconsistent treatment.*c1"):
            load_trial(path, pi=0.5)

    def test_missing_value_reports_row(self, tmp_path):
        frame = pd.DataFrame({
            "cluster_id": ["c1", "c1", "c2", "c2"], "treatment": [0, 0, 1, 1],
            "mediator": [1.0, np.nan, 0.0, 1.0], "outcome": [0.0, 0.0, 1.0, 1.0],
        })
        path = tmp_path / "t.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(TrialDataError, match="row 1"):
            load_trial(path, pi=0.5)

    def test_nonbinary_treatment_rejected(self, tmp_path):
        frame = pd.DataFrame({
            "cluster_id": ["c1", "c2"], "treatment": [2, 0],
            "mediator": [1.0, 2.0], "outcome": [0.0, 0.0],
        })
        path = tmp_path / "t.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(TrialDataError, match="0 or 1"):
            load_trial(path, pi=0.5)

    def test_rps_shaped_file(self, tmp_path):
        # 449 individuals spread over 42 clusters
        rng = np.random.default_rng(42)
        sizes = np.full(42, 449 // 42)
        sizes[: 449 - sizes.sum()] += 1
        assert sizes.sum() == 449
        rows = []
        for i, n in enumerate(sizes):
            a = int(i < 21)
            for _ in range(n):
                rows.append({"cluster_id": f"com{i}", "treatment": a,
                             "mediator": float(rng.integers(0, 13)),
                             "outcome": rng.normal(-1.7, 1.2)})
        path = tmp_path / "rps.csv"
        pd.DataFrame(rows).to_csv(path, index=False)
        trial = load_trial(path, pi=0.5)
        assert trial.k == 42
        assert int(trial.sizes.sum()) == 449

    def test_roundtrip_preserves_rows(self, tmp_path):
        trial = make_trial(k=5, seed=3)
        frame = trial_to_frame(trial)
        path = tmp_path / "rt.csv"
        frame.to_csv(path, index=False)
        back = load_trial(path, pi=trial.pi)
        assert back.k == trial.k
        for orig, re in zip(trial.clusters, back.clusters):
            assert re.n == orig.n and re.a == orig.a
            np.testing.assert_allclose(re.m, orig.m)
            np.testing.assert_allclose(re.y, orig.y)


class TestBuildFeatures:
    def test_own_and_loo_mean(self):
        rec = ClusterRecord(id="c", n=3, v=np.array([0.7]), x=np.zeros((3, 1)),
                            a=1, m=np.array([2.0, 4.0, 6.0]), y=np.zeros(3))
        feats = build_features(rec, 0, SummaryConfig())
        names = feature_names(SummaryConfig(), d_x=1, d_v=1)
        out = dict(zip(names, feats))
        assert out["m_own"] == 2.0
        assert out["m_loo"] == 5.0
        assert out["singleton"] == 0.0
        assert out["n"] == 3.0

    def test_singleton_convention(self):
        rec = ClusterRecord(id="c", n=1, v=np.zeros(1), x=np.zeros((1, 1)),
                            a=0, m=np.array([3.0]), y=np.zeros(1))
        out = dict(zip(feature_names(SummaryConfig(), 1, 1),
                       build_features(rec, 0, SummaryConfig())))
        assert out["m_own"] == 3.0
        assert out["m_loo"] == 0.0
        assert out["singleton"] == 1.0

    def test_covariate_loo_rows(self):
        rec = ClusterRecord(id="c", n=2, v=np.zeros(1),
                            x=np.array([[1.0, 0.0], [3.0, 2.0]]),
                            a=0, m=np.zeros(2), y=np.zeros(2))
        out = dict(zip(feature_names(SummaryConfig(), 2, 1),
                       build_features(rec, 1, SummaryConfig())))
        assert (out["x_own0"], out["x_own1"]) == (3.0, 2.0)
        assert (out["x_loo0"], out["x_loo1"]) == (1.0, 0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10**6))
    def test_permutation_equivariance(self, n, seed):
        rng = np.random.default_rng(seed)
        rec = ClusterRecord(id="c", n=n, v=rng.normal(size=1),
                            x=rng.normal(size=(n, 2)), a=1,
                            m=rng.normal(size=n), y=rng.normal(size=n))
        perm = rng.permutation(n)
        rec_p = ClusterRecord(id="c", n=n, v=rec.v, x=rec.x[perm], a=1,
                              m=rec.m[perm], y=rec.y[perm])
        j = int(rng.integers(n))
        j_new = int(np.flatnonzero(perm == j)[0])
        np.testing.assert_allclose(
            build_features(rec, j, SummaryConfig()),
            build_features(rec_p, j_new, SummaryConfig()),
        )


class TestSplitFolds:
    def test_balanced_sizes(self):
        trial = make_trial(k=10)
        folds = split_folds(trial, 5, seed=1)
        counts = np.bincount(folds, minlength=5)
        assert list(counts) == [2, 2, 2, 2, 2]

    def test_uneven_partition(self):
        trial = make_trial(k=7)
        folds = split_folds(trial, 3, seed=2)
        counts = sorted(np.bincount(folds, minlength=3), reverse=True)
        assert counts == [3, 2, 2]

    def test_deterministic(self):
        trial = make_trial(k=9)
        np.testing.assert_array_equal(split_folds(trial, 4, 7), split_folds(trial, 4, 7))

    def test_too_many_folds_rejected(self):
        trial = make_trial(k=4)
        with pytest.raises(ValueError, match="cannot split"):
            split_folds(trial, 5, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(4, 20), st.integers(2, 4), st.integers(0, 10**6))
    def test_partition_property(self, k, folds, seed):
        trial = make_trial(k=k, seed=seed % 17)
        assignment = split_folds(trial, folds, seed)
        assert assignment.shape == (k,)
        assert set(assignment) == set(range(folds))
        counts = np.bincount(assignment, minlength=folds)
        assert counts.max() - counts.min() <= 1


class TestResample:
    def test_whole_clusters_only(self):
        trial = make_trial(k=3)
        boot = resample_clusters(trial, seed=5)
        assert boot.k == 3
        originals = {id(rec) for rec in trial.clusters}
        assert all(id(rec) in originals for rec in boot.clusters)

    def test_deterministic(self):
        trial = make_trial(k=5)
        ids1 = [rec.id for rec in resample_clusters(trial, 11).clusters]
        ids2 = [rec.id for rec in resample_clusters(trial, 11).clusters]
        assert ids1 == ids2

    def test_expected_appearance_count(self):
        # each cluster appears once per draw on average
        trial = make_trial(k=3)
        total = np.zeros(3)
        n_seeds = 10**5
        rng = np.random.default_rng(0)
        idx = rng.integers(0, 3, size=(n_seeds, 3))
        for row in range(3):
            total[row] = (idx == row).sum()
        counts = total / n_seeds
        np.testing.assert_allclose(counts, 1.0, atol=0.01)

    def test_expected_appearance_count_through_api(self):
        trial = make_trial(k=3)
        hits = np.zeros(3)
        n_seeds = 4000
        for seed in range(n_seeds):
            boot = resample_clusters(trial, seed)
            for rec in boot.clusters:
                hits[int(rec.id[1:])] += 1
        np.testing.assert_allclose(hits / n_seeds, 1.0, atol=0.06)


class TestEffectScale:
    def test_identities(self):
        assert EffectScale("difference").identity == 0.0
        assert EffectScale("ratio").identity == 1.0
        assert EffectScale("odds_ratio").identity == 1.0
        for kind in ("difference", "ratio", "odds_ratio"):
            scale = EffectScale(kind)
            assert scale.g(0.4, 0.4) == pytest.approx(scale.identity)

    def test_ratio_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="positive"):
            EffectScale("ratio").g(1.0, 0.0)

    def test_trial_pi_bounds(self):
        clusters = (make_record("a", a=1), make_record("b", a=0))
        with pytest.raises(TrialDataError):
            Trial(clusters=clusters, pi=0.0)
        with pytest.raises(TrialDataError):
            Trial(clusters=clusters, pi=1.2)
