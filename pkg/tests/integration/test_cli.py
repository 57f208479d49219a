"""命令行集成测试"""

import json

import pandas as pd
import pytest

from cli import EXIT_INPUT_ERROR, EXIT_OK, main
from services.evidence import load_evidence
from tests.fixtures.evidence import to_csv

pytestmark = pytest.mark.integration

ROWS = [
    "A1,CRC,-0.40,0.10,2004-01-01,-0.30,0.15,2006-01-01",
    "A2,CRC,-0.25,0.12,2006-01-01,-0.20,0.14,2008-01-01",
    "A3,CRC,-0.35,0.11,2009-01-01,,,",
    "B1,NSCLC,-0.10,0.11,2005-01-01,-0.05,0.13,2007-01-01",
    "B2,NSCLC,-0.30,0.09,2007-01-01,-0.22,0.12,2009-01-01",
]
FAST = ["--chains", "2", "--burnin", "100", "--samples", "200", "--seed", "7"]


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "trials.csv"
    path.write_text(to_csv(*ROWS), encoding="utf-8")
    return path


def run_cli(*argv):
    return main([str(arg) for arg in argv])


class TestValidate:
    """validate 子命令测试"""

    def test_valid_file(self, data_file, tmp_path, capsys):
        out = tmp_path / "validate"
        assert run_cli("validate", "--data", data_file, "--out", out) == EXIT_OK

        printed = capsys.readouterr().out
        assert "total: 5 trials, 5 PFS, 4 OS" in printed
        report = json.loads((out / "validation.json").read_text(encoding="utf-8"))
        assert report["n_indications"] == 2
        assert report["totals"]["n_trials"] == 5

    def test_duplicate_study(self, tmp_path, capsys):
        path = tmp_path / "dup.csv"
        path.write_text(to_csv(ROWS[0], ROWS[0]), encoding="utf-8")
        assert run_cli("validate", "--data", path, "--out", tmp_path / "v") == EXIT_INPUT_ERROR
        assert "duplicate study_id 'A1'" in capsys.readouterr().err

    def test_empty_file(self, tmp_path, capsys):
        path = tmp_path / "empty.csv"
        path.write_text(to_csv(), encoding="utf-8")
        assert run_cli("validate", "--data", path, "--out", tmp_path / "v") == EXIT_INPUT_ERROR
        assert "no records" in capsys.readouterr().err

    def test_missing_data_option(self, tmp_path, capsys):
        assert run_cli("validate", "--out", tmp_path / "v") == EXIT_INPUT_ERROR
        assert "needs --data" in capsys.readouterr().err

    def test_snapshot_drops_late_reports(self, data_file, tmp_path, capsys):
        assert run_cli("validate", "--data", data_file, "--snapshot", "2007-06-30", "--out", tmp_path / "v") == EXIT_OK
        assert "total: 4 trials, 4 PFS, 2 OS" in capsys.readouterr().out


class TestFit:
    """fit 子命令测试"""

    def test_outputs(self, data_file, tmp_path):
        out = tmp_path / "fit"
        assert run_cli("fit", "--data", data_file, "--sharing", "MCIP", "--out", out, *FAST) == EXIT_OK

        for name in ("summary.csv", "forest.csv", "convergence.csv", "fit.json", "manifest.json"):
            assert (out / name).exists()
        summary = pd.read_csv(out / "summary.csv")
        assert {"indication", "pooled", "heterogeneity", "mixture", "prediction"} <= set(summary["group"])

        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "fit"
        assert manifest["seed"] == 7
        assert manifest["data_checksum"].startswith("sha256:")
        assert "sharing = MCIP" in manifest["config"]
        # tiny chains never reach the ESS threshold
        assert manifest["status"] == "warning"

    def test_rerun_is_byte_identical(self, data_file, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        assert run_cli("fit", "--data", data_file, "--sharing", "RP", "--out", first, *FAST) == EXIT_OK
        assert run_cli("fit", "--data", data_file, "--sharing", "RP", "--out", second, *FAST) == EXIT_OK
        for name in ("summary.csv", "convergence.csv", "fit.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_bivariate_on_single_indication(self, data_file, tmp_path):
        out = tmp_path / "fit"
        code = run_cli(
            "fit", "--data", data_file, "--endpoint-mode", "bivariate-surrogacy", "--sharing", "IP",
            "--exclude-indication", "NSCLC", "--out", out, *FAST,
        )
        assert code == EXIT_OK
        summary = pd.read_csv(out / "summary.csv")
        assert set(summary["quantity"]) == {"lambda0_eff", "lambda1_eff", "psi_eff"}
        assert set(summary["label"]) == {"CRC"}

    def test_raw_draws_from_config(self, data_file, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("write_draws = true\nsharing = CP\n", encoding="utf-8")
        out = tmp_path / "fit"
        assert run_cli("fit", "--data", data_file, "--config", config, "--out", out, *FAST) == EXIT_OK
        assert (out / "draws.bin").exists()
        assert (out / "draws_index.json").exists()

    def test_invalid_flag_combination(self, data_file, tmp_path, capsys):
        code = run_cli("fit", "--data", data_file, "--tie-mixture", "--out", tmp_path / "fit", *FAST)
        assert code == EXIT_INPUT_ERROR
        assert "tie_mixture_probabilities" in capsys.readouterr().err


class TestCompare:
    def test_five_structures(self, data_file, tmp_path, capsys):
        out = tmp_path / "compare"
        assert run_cli("compare", "--data", data_file, "--out", out, *FAST) == EXIT_OK

        table = pd.read_csv(out / "dic_table.csv")
        assert table["structure"].tolist() == ["IP", "CP", "MCIP", "RP", "MRIP"]
        assert table["dic"].notna().all()
        assert table["selected"].sum() == 1
        assert table["delta_dic"].min() == 0.0
        selected = table.loc[table["selected"], "structure"].item()
        assert f"selected: {selected}" in capsys.readouterr().out


class TestPredict:
    def test_matched_predictions(self, data_file, tmp_path):
        out = tmp_path / "predict"
        assert run_cli("predict", "--data", data_file, "--sharing", "CP", "--out", out, *FAST) == EXIT_OK

        table = pd.read_csv(out / "predictions.csv")
        assert table["indication"].tolist() == ["CRC", "NSCLC"]
        assert set(table["mode"]) == {"Matched"}
        assert set(table["pfs_source"]) == {"CP"}
        assert (table["lo95"] < table["hi95"]).all()

    def test_common_parameter_rows_are_identical_across_indications(self, data_file, tmp_path):
        out = tmp_path / "predict"
        assert run_cli("predict", "--data", data_file, "--sharing", "CP", "--out", out, *FAST) == EXIT_OK

        table = pd.read_csv(out / "predictions.csv")
        assert len(table) == 2
        assert (table.drop(columns="indication").nunique(dropna=False) == 1).all()

    def test_ip_pfs_with_conditional_variance(self, data_file, tmp_path):
        out = tmp_path / "predict"
        code = run_cli(
            "predict", "--data", data_file, "--sharing", "RP", "--mode", "ip-pfs", "--include-psi",
            "--out", out, *FAST,
        )
        assert code == EXIT_OK
        table = pd.read_csv(out / "predictions.csv")
        assert set(table["mode"]) == {"IP-PFS"}
        assert set(table["pfs_source"]) == {"IP"}
        assert table["include_psi"].all()


class TestCrossval:
    def test_notice_row_for_small_indication(self, tmp_path):
        path = tmp_path / "trials.csv"
        path.write_text(to_csv(*ROWS[:3], ROWS[3]), encoding="utf-8")
        out = tmp_path / "crossval"
        assert run_cli("crossval", "--data", path, "--sharing", "IP", "--out", out, *FAST) == EXIT_OK

        table = pd.read_csv(out / "crossval.csv")
        assert table.loc[table["row_type"] == "study", "study_id"].tolist() == ["A1", "A2"]
        assert table.loc[table["row_type"] == "skipped", "indication"].tolist() == ["NSCLC"]
        assert table.loc[table["row_type"] == "coverage", "n_masked"].item() == 2


class TestSimulate:
    def test_scenario_outputs(self, tmp_path):
        scenario = tmp_path / "scenario.cfg"
        scenario.write_text("n_indications = 3\ntrials_per_indication = 2\nseed = 5\n", encoding="utf-8")
        out = tmp_path / "synthetic"
        assert run_cli("simulate", "--scenario", scenario, "--out", out) == EXIT_OK

        evidence = load_evidence(out / "evidence.csv")
        truth = json.loads((out / "truth.json").read_text(encoding="utf-8"))
        assert len(evidence.records) == 6
        assert truth["indication_labels"] == ["IND1", "IND2", "IND3"]
        assert truth["seed"] == 5

    def test_seed_flag_overrides_scenario(self, tmp_path):
        scenario = tmp_path / "scenario.cfg"
        scenario.write_text("seed = 5\n", encoding="utf-8")
        assert run_cli("simulate", "--scenario", scenario, "--seed", "6", "--out", tmp_path / "a") == EXIT_OK
        assert json.loads((tmp_path / "a" / "truth.json").read_text(encoding="utf-8"))["seed"] == 6

    def test_calibration_needs_enough_replications(self, tmp_path, capsys):
        scenario = tmp_path / "scenario.cfg"
        scenario.write_text("seed = 5\n", encoding="utf-8")
        code = run_cli("simulate", "--scenario", scenario, "--calibrate", "3", "--out", tmp_path / "a", *FAST)
        assert code == EXIT_INPUT_ERROR
        assert "at least 50" in capsys.readouterr().err


class TestConfigErrors:
    def test_unknown_key_reports_line(self, data_file, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("seed = 1\nchains = 2\n", encoding="utf-8")
        assert run_cli("fit", "--data", data_file, "--config", config, "--out", tmp_path / "fit") == EXIT_INPUT_ERROR
        assert "unknown key 'chains', line 2" in capsys.readouterr().err

    def test_missing_config_file(self, data_file, tmp_path):
        code = run_cli("fit", "--data", data_file, "--config", tmp_path / "absent.cfg", "--out", tmp_path / "fit")
        assert code == EXIT_INPUT_ERROR
