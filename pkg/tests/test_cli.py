import json
import os
import subprocess
import sys

import pandas as pd
import pytest

from robplam import cli

AQ_FLAGS = ["--response", "Ozone", "--linear", "Month:categorical", "--smooth", "Temp,Wind,Solar.R",
            "--knots", "quantile"]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    if capsys is None:
        return code, None
    return code, capsys.readouterr()


def files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def aq_mm(tmp_path_factory, airquality_path):
    out = tmp_path_factory.mktemp("mm")
    assert cli.main(["fit", "--data", str(airquality_path), *AQ_FLAGS, "--method", "mm", "--out", str(out)]) == 0
    return out


def test_fit_mm(aq_mm):
    coef = pd.read_csv(aq_mm / "coefficients.csv")
    assert coef["estimate"][0] == pytest.approx(40.651, abs=0.5)
    summary = json.loads((aq_mm / "summary.json").read_text())
    assert summary["selected_k"] == [5, 5, 5]
    assert summary["outliers"] == [23, 34, 53, 77]
    assert set(os.listdir(aq_mm)) == {"coefficients.csv", "curves.csv", "residuals.csv", "summary.json",
                                      "model.json"}


def test_fit_ls(tmp_path, airquality_path):
    assert run(["fit", "--data", airquality_path, *AQ_FLAGS, "--method", "ls", "--out", tmp_path])[0] == 0
    coef = pd.read_csv(tmp_path / "coefficients.csv")
    assert coef["estimate"][0] == pytest.approx(46.054, abs=0.1)


def test_fit_is_byte_identical(airquality_path, aq_mm):
    before = files(aq_mm)
    assert run(["fit", "--data", airquality_path, *AQ_FLAGS, "--method", "mm", "--out", aq_mm])[0] == 0
    assert files(aq_mm) == before


def test_missing_response(tmp_path, airquality_path, capsys):
    code, out = run(["fit", "--data", airquality_path, "--response", "Ozone3", "--smooth", "Temp",
                     "--out", tmp_path], capsys)
    assert code == 3
    record = json.loads(out.err.strip().splitlines()[-1])
    assert record["error"] == "DATASET_SCHEMA" and record["exit_status"] == 3


def test_missing_file(tmp_path, capsys):
    code, out = run(["fit", "--data", tmp_path / "none.csv", "--response", "y", "--smooth", "x"], capsys)
    assert code == 3 and json.loads(out.err)["error"] == "DATASET"


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["simulate", "--model", "1", "--contamination", "C0", "--reps", "0"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["simulate", "--model", "9", "--contamination", "C0"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2
    code, out = run(["bench-tables", "--models", "7", "--out", tmp_path], capsys)
    assert code == 2 and json.loads(out.err.strip().splitlines()[-1])["error"] == "USAGE"


def test_bad_config(tmp_path, airquality_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    code, _ = run(["fit", "--data", airquality_path, *AQ_FLAGS, "--config", cfg, "--out", tmp_path], capsys)
    assert code == 2


def test_flags_override_config(tmp_path, airquality_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"method": "mm", "k_grid": [5], "n_sub": 50}))
    out = tmp_path / "out"
    assert run(["fit", "--data", airquality_path, *AQ_FLAGS, "--config", cfg, "--method", "ls", "--out", out])[0] == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "ls"
    assert summary["config"]["k_grid"] == [5] and summary["config"]["n_sub"] == 50


def test_env_output_dir(tmp_path, airquality_path, monkeypatch):
    monkeypatch.setenv("ROBPLAM_OUTPUT_DIR", str(tmp_path / "env"))
    assert run(["fit", "--data", airquality_path, *AQ_FLAGS, "--method", "ls", "--k-grid", "5"])[0] == 0
    assert (tmp_path / "env" / "coefficients.csv").exists()


def test_predict(tmp_path, airquality_path, aq_mm):
    assert run(["predict", "--model", aq_mm / "model.json", "--data", airquality_path, "--out", tmp_path])[0] == 0
    pred = pd.read_csv(tmp_path / "predictions.csv")
    assert len(pred) == 146
    res = pd.read_csv(aq_mm / "residuals.csv", float_precision="round_trip")
    merged = res.merge(pred, on="source_row")
    assert len(merged) == 111
    assert (merged["fitted"] - merged["prediction"]).abs().max() < 1e-10


def test_simulate_is_byte_identical(tmp_path):
    argv = ["simulate", "--model", 1, "--contamination", "C0", "--n", 100, "--reps", 10, "--seed", 7]
    assert run(argv + ["--out", tmp_path / "a"])[0] == 0
    assert run(argv + ["--out", tmp_path / "b"])[0] == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert set(a) == {"summary_model1_C0.csv", "kselect_model1_C0.csv", "curves_model1_C0.csv"}
    assert a == b


def test_bench_tables_smoke(tmp_path):
    assert run(["bench-tables", "--reps", 2, "--seed", 3, "--out", tmp_path])[0] == 0
    summaries = sorted(tmp_path.glob("summary_*.csv"))
    assert len(summaries) == 24
    cmp = pd.read_csv(tmp_path / "comparison.csv")
    assert len(cmp) == 768
    status = json.loads((tmp_path / "bench_status.json").read_text())
    assert len(status["completed"]) == 24 and status["failed"] == []


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "robplam.cli", "simulate", "--model", "2", "--contamination",
                          "C3", "--reps", "1", "--n", "60", "--k-grid", "4-5", "--n-sub", "50",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "summary_model2_C3.csv").exists()
