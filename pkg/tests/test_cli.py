import json

import pandas as pd
import pytest

from practivar.cli import main

from conftest import build_frame
from practivar import Cohort, save_cohort


@pytest.fixture
def cohort_csv(tmp_path):
    frame = build_frame(n=200, n_practices=6, seed=20)
    path = tmp_path / "cohort.csv"
    save_cohort(Cohort(frame), path)
    return path


def test_adjust_risk_output(capsys):
    assert main(["adjust-risk", "--base", "0.10", "--frailty", "1.7"]) == 0
    assert capsys.readouterr().out.strip() == "0.1640"


def test_usage_error_exit_code(capsys):
    assert main(["adjust-risk", "--base", "0.10"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "\n" not in err.strip()


def test_input_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,cohort\n1,2,3\n")
    assert main(["stability", "--cohort", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_single_practice_fit_is_input_error(tmp_path, capsys):
    frame = build_frame(n=30, n_practices=1, seed=21)
    path = tmp_path / "one.csv"
    save_cohort(Cohort(frame), path)
    assert main(["fit-intercept", "--cohort", str(path),
                 "--out-dir", str(tmp_path)]) == 1
    assert "practice" in capsys.readouterr().err


def test_generate_writes_manifest(tmp_path):
    out = tmp_path / "run"
    assert main(["generate", "--seed", "3", "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert "cohort.csv" in manifest["outputs"]
    assert manifest["seeds"] == {"generate": 3}
    assert "numpy" in manifest["versions"]


def test_generate_deterministic_digests(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert main(["generate", "--seed", "9", "--out-dir", str(out)]) == 0
    m1 = json.loads((out1 / "manifest.json").read_text())["outputs"]
    m2 = json.loads((out2 / "manifest.json").read_text())["outputs"]
    assert m1 == m2


def test_stability_command(cohort_csv, tmp_path, capsys):
    out = tmp_path / "stab"
    assert main(["stability", "--cohort", str(cohort_csv), "--bins", "6",
                 "--out-dir", str(out)]) == 0
    table = pd.read_csv(out / "stability_report.csv")
    assert {"variable", "source_id", "spo", "gpd"} <= set(table.columns)
    assert table["spo"].between(0, 1).all()
    assert (table["variable"] == "missing:sbp").any()


def test_impute_command(cohort_csv, tmp_path):
    import numpy as np
    frame = pd.read_csv(cohort_csv)
    frame.loc[frame.index[:40], "sbp"] = np.nan
    frame.to_csv(cohort_csv, index=False)
    out = tmp_path / "imp"
    assert main(["impute", "--cohort", str(cohort_csv), "--imputations", "2",
                 "--out-dir", str(out)]) == 0
    assert (out / "imputed_01.csv").exists()
    assert (out / "imputed_02.csv").exists()
    assert json.loads((out / "imputed_index.json").read_text())


def test_fit_intercept_command(cohort_csv, tmp_path):
    out = tmp_path / "fit"
    assert main(["fit-intercept", "--cohort", str(cohort_csv),
                 "--out-dir", str(out)]) == 0
    frailty = pd.read_csv(out / "frailty.csv")
    assert list(frailty.columns) == ["practice_id", "b", "exp_b", "shrinkage_se"]
    summary = json.loads((out / "fit_summary.json").read_text())
    assert "sigma_b2" in summary["random_intercept"]


def test_simulate_effects_command(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate-effects", "--sigma-b2", "0.03", "--draws", "1e5",
                 "--out-dir", str(out)]) == 0
    table = pd.read_csv(out / "effect_draws.csv")
    assert set(table["statistic"]) == {"mean", "p0.5", "p2.5", "p25",
                                       "p50", "p75", "p97.5", "p99.5"}


def test_pipeline_smoke(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("n_practices: 8\npatients_per_practice: 60\n"
                   "intercept_sd: 0.2\nseed: 5\n"
                   "missing_rates:\n  sbp: 0.1\n")
    out = tmp_path / "pipe"
    assert main(["pipeline", "--config", str(cfg), "--imputations", "2",
                 "--repeats", "2", "--practice-subsample-frac", "0.6",
                 "--draws", "1e4", "--out-dir", str(out)]) == 0
    for name in ("cohort.csv", "ground_truth.csv", "stability_report.csv",
                 "frailty.csv", "fit_summary.json", "quintile_table.csv",
                 "correlations.csv", "plotdata_beeswarm.csv", "risk_ranges.csv",
                 "effect_draws.csv", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["timings_seconds"]) >= {"generate", "stability", "impute",
                                                "fit_intercept", "fit_slope",
                                                "simulate", "report"}


def test_json_format_option(tmp_path):
    out = tmp_path / "simjson"
    assert main(["simulate-effects", "--draws", "1e4", "--format", "json",
                 "--out-dir", str(out)]) == 0
    assert json.loads((out / "effect_draws.json").read_text())
