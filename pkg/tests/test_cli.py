import json

import numpy as np
import pandas as pd
import pytest

from crtmed.cli import main
from crtmed.data import trial_to_frame
from crtmed.sim import FiniteDgp, LinearGaussianDgp, generate_trial, rps_like_dgp


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def write_trial_csv(tmp_path, dgp, k, seed, name="trial.csv"):
    trial = generate_trial(dgp, k, seed)
    path = tmp_path / name
    trial_to_frame(trial).to_csv(path, index=False)
    return str(path), trial


class TestAnalyze:
    def analyze_config(self, tmp_path, csv_path, estimators, inference=None, seed=11):
        return write_config(
            tmp_path,
            "analyze.json",
            {
                "input": csv_path,
                "pi": 0.5,
                "estimators": estimators,
                "inference": inference or {"method": "auto", "b": 100},
                "scale": "difference",
                "seed": seed,
                "out": str(tmp_path / "out"),
            },
        )

    def test_report_written_with_intervals(self, tmp_path):
        csv_path, _ = write_trial_csv(tmp_path, LinearGaussianDgp(), k=14, seed=1)
        cfg = self.analyze_config(
            tmp_path, csv_path,
            [{"family": "eif2", "backend": "parametric", "draws": 1000}],
        )
        assert main(["analyze", "--config", cfg]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        block = report["estimators"]["eif2-par-ns"]
        assert "nie_c" in block["intervals"]
        assert {"point", "lower", "upper", "se"} <= set(block["intervals"]["nie_c"])
        csv = pd.read_csv(tmp_path / "out" / "effects.csv")
        assert {"estimator", "quantity", "point", "lower", "upper"} <= set(csv.columns)

    def test_rps_shaped_ml_run_reports_nie(self, tmp_path):
        csv_path, _ = write_trial_csv(tmp_path, rps_like_dgp(), k=42, seed=2)
        cfg = self.analyze_config(
            tmp_path, csv_path,
            [{"family": "eif1", "backend": "ml", "stabilized": False,
              "folds": 5, "draws": 1000}],
        )
        assert main(["analyze", "--config", cfg]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        interval = report["estimators"]["eif1-ml-ns"]["intervals"]["nie_c"]
        assert np.isfinite(interval["point"])
        assert interval["lower"] <= interval["point"] <= interval["upper"]

    def test_null_outcome_hits_scale_identity(self, tmp_path):
        dgp = LinearGaussianDgp(beta0=0.0, beta_a=0.0, beta_own=0.0, beta_spill=0.0,
                                beta_v=0.0, beta_x=0.0, beta_n=0.0, sigma_y=0.0)
        csv_path, _ = write_trial_csv(tmp_path, dgp, k=12, seed=3)
        cfg = self.analyze_config(
            tmp_path, csv_path, [{"family": "eif2", "draws": 1000}],
        )
        assert main(["analyze", "--config", cfg]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        effects = report["estimators"]["eif2-par-ns"]["effects"]
        for name in ("te_c", "nie_c", "nde_c", "sme_c", "ime_c"):
            assert effects[name] == pytest.approx(0.0, abs=1e-9)

    def test_reports_are_byte_identical(self, tmp_path):
        csv_path, _ = write_trial_csv(tmp_path, LinearGaussianDgp(), k=12, seed=4)
        cfg = self.analyze_config(
            tmp_path, csv_path, [{"family": "eif2", "draws": 1000}],
        )
        assert main(["analyze", "--config", cfg]) == 0
        first = (tmp_path / "out" / "report.json").read_bytes()
        assert main(["analyze", "--config", cfg]) == 0
        second = (tmp_path / "out" / "report.json").read_bytes()
        assert first == second


class TestValidate:
    def test_reports_shape(self, tmp_path):
        csv_path, trial = write_trial_csv(tmp_path, LinearGaussianDgp(), k=10, seed=5)
        cfg = write_config(tmp_path, "v.json", {
            "input": csv_path, "seed": 0, "out": str(tmp_path / "out"),
        })
        assert main(["validate", "--config", cfg]) == 0
        payload = json.loads((tmp_path / "out" / "validate.json").read_text())
        assert payload["clusters"] == 10
        assert payload["individuals"] == int(trial.sizes.sum())

    def test_mixed_treatment_exits_2_naming_cluster(self, tmp_path, capsys):
        frame = pd.DataFrame({
            "cluster_id": ["c1", "c1", "c2", "c2"],
            "treatment": [0, 1, 1, 1],
            "mediator": [1.0, 2.0, 0.5, 1.5],
            "outcome": [0.1, 0.2, 0.3, 0.4],
        })
        path = tmp_path / "bad.csv"
        frame.to_csv(path, index=False)
        cfg = write_config(tmp_path, "v.json", {"input": str(path), "seed": 0})
        assert main(["validate", "--config", cfg]) == 2
        err = capsys.readouterr().err
        assert "c1" in err and "inconsistent treatment" in err

    def test_missing_seed_exits_2(self, tmp_path):
        cfg = write_config(tmp_path, "v.json", {"input": "nowhere.csv"})
        assert main(["validate", "--config", cfg]) == 2

    def test_missing_file_exits_2(self, tmp_path):
        cfg = write_config(tmp_path, "v.json", {"input": "nowhere.csv", "seed": 0})
        assert main(["validate", "--config", cfg]) == 2


class TestSimulateAndOracle:
    def test_simulate_emits_row_per_estimator_quantity(self, tmp_path):
        cfg = write_config(tmp_path, "s.json", {
            "dgp": {"kind": "linear_gaussian"},
            "k": 15,
            "replicates": 2,
            "estimators": [{"family": "eif2", "draws": 1000},
                           {"family": "mf", "draws": 1000}],
            "seed": 6,
            "out": str(tmp_path / "out"),
        })
        assert main(["simulate", "--config", cfg]) == 0
        rows = pd.read_csv(tmp_path / "out" / "scenario.csv")
        combos = rows[["estimator", "quantity"]].apply(tuple, axis=1)
        assert combos.is_unique
        assert set(rows["estimator"]) == {"eif2-par-ns", "mf-par"}

    def test_oracle_spillover_free_reports_zero_sme(self, tmp_path):
        cfg = write_config(tmp_path, "o.json", {
            "dgp": {"kind": "finite", "beta_spill": 0.0},
            "seed": 7,
            "out": str(tmp_path / "out"),
        })
        assert main(["oracle", "--config", cfg]) == 0
        payload = json.loads((tmp_path / "out" / "oracle.json").read_text())
        assert payload["effects"]["sme_c"] == pytest.approx(0.0, abs=1e-12)
        assert payload["method"] == "enumeration"

    def test_bad_dgp_kind_exits_2(self, tmp_path):
        cfg = write_config(tmp_path, "o.json", {"dgp": {"kind": "mystery"}, "seed": 0})
        assert main(["oracle", "--config", cfg]) == 2

    def test_seed_override_changes_provenance(self, tmp_path):
        cfg = write_config(tmp_path, "o.json", {
            "dgp": {"kind": "finite"}, "seed": 1, "out": str(tmp_path / "out"),
        })
        assert main(["oracle", "--config", cfg, "--seed", "99"]) == 0
        payload = json.loads((tmp_path / "out" / "oracle.json").read_text())
        assert payload["provenance"]["seed"] == 99
