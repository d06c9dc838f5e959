import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.config import get_fresh_settings
from app.main import main
from app.services import runner
from app.utils.errors import NumericalError

SHORT_CHAIN = ["--iters", "30", "--thin", "3", "--burnin", "5"]


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return code, lines


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"simulation": {"n_units": 20}}), encoding="utf-8")
    return path


@pytest.fixture
def simulated(tmp_path, small_config, capsys):
    out = tmp_path / "sim"
    code, _ = _run(
        ["simulate", "--replicates", 2, "--periods", 6, "--rhos", 0.5, "--seed", 3, "--config", small_config, "--out", out],
        capsys,
    )
    assert code == 0
    return {
        "dir": out,
        "schema": out / "schema.json",
        "masked": out / "replicate_001" / "masked.csv",
        "truth": out / "replicate_001" / "truth.csv",
        "complete": out / "replicate_001" / "complete.csv",
    }


def test_simulate_writes_dataset_triples(simulated):
    out = simulated["dir"]
    for replicate in ("replicate_001", "replicate_002"):
        for name in ("complete.csv", "masked.csv", "truth.csv", "missingness.csv"):
            assert (out / replicate / name).is_file()
    complete = pd.read_csv(simulated["complete"])
    assert list(complete.columns) == ["UnitId", "TimeId", "V1", "V2", "V3", "V4", "V5"]
    assert len(complete) == 120
    schema = json.loads(simulated["schema"].read_text(encoding="utf-8"))
    assert schema["UnitId"] == "unit" and schema["V5"] == "binary"
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["subcommand"] == "simulate" and manifest["exit_code"] == 0
    first = pd.read_csv(simulated["complete"])
    second = pd.read_csv(out / "replicate_002" / "complete.csv")
    assert not first["V1"].equals(second["V1"])


def test_stdout_carries_only_paths(tmp_path, small_config, capsys):
    code, lines = _run(["simulate", "--replicates", 1, "--config", small_config, "--out", tmp_path / "s"], capsys)
    assert code == 0 and lines
    assert all(Path(line).exists() for line in lines)


def test_impute_long_format(tmp_path, simulated, capsys):
    out = tmp_path / "run"
    code, lines = _run(
        ["impute", "--input", simulated["masked"], "--schema", simulated["schema"], *SHORT_CHAIN, "--out", out],
        capsys,
    )
    assert code == 0
    assert str(out / "manifest.json") in lines
    draws = pd.read_csv(out / "draws" / "draws_long.csv")
    assert list(draws.columns) == ["frame", "row", "column", "value"]
    assert draws["frame"].max() == 5
    truth = pd.read_csv(simulated["truth"])
    assert len(draws) == 5 * len(truth)
    summary = pd.read_csv(out / "summary.csv")
    assert list(summary.columns) == ["row", "column", "point", "lower", "upper"]
    assert len(summary) == len(truth)
    corr = pd.read_csv(out / "draws" / "corr_draws.csv")
    assert len(corr) == 5 * 10


def test_impute_frames_format(tmp_path, simulated, capsys):
    out = tmp_path / "frames_run"
    code, _ = _run(
        ["impute", "--input", simulated["masked"], "--schema", simulated["schema"], *SHORT_CHAIN,
         "--format", "frames", "--out", out],
        capsys,
    )
    assert code == 0
    frames = sorted((out / "frames").glob("frame_*.csv"))
    assert [p.name for p in frames][:2] == ["frame_0001.csv", "frame_0002.csv"]
    assert len(frames) == 5
    completed = pd.read_csv(frames[0])
    assert not completed.isna().any().any()


def test_impute_with_lags_reports_copula_columns(tmp_path, simulated, capsys):
    out = tmp_path / "lagged"
    code, _ = _run(
        ["impute", "--input", simulated["masked"], "--schema", simulated["schema"], *SHORT_CHAIN,
         "--lags", 1, "--out", out],
        capsys,
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["copula_columns"] == 10
    summary = pd.read_csv(out / "summary.csv")
    assert not summary["column"].str.contains("_lag").any()


def test_impute_reruns_are_byte_identical(tmp_path, simulated, capsys):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        code, _ = _run(
            ["impute", "--input", simulated["masked"], "--schema", simulated["schema"], *SHORT_CHAIN,
             "--seed", 7, "--out", out],
            capsys,
        )
        assert code == 0
        outputs.append(out)
    files = sorted(p.relative_to(outputs[0]) for p in outputs[0].rglob("*") if p.is_file())
    assert files
    for rel in files:
        if rel.name == "manifest.json":
            continue
        assert (outputs[0] / rel).read_bytes() == (outputs[1] / rel).read_bytes()


def test_config_error_exit_code(tmp_path, simulated, capsys):
    code, lines = _run(
        ["impute", "--input", simulated["masked"], "--schema", simulated["schema"],
         "--iters", 10, "--thin", 5, "--burnin", 2, "--out", tmp_path / "bad"],
        capsys,
    )
    assert code == 2 and lines == []
    code, _ = _run(
        ["impute", "--input", simulated["masked"], "--schema", tmp_path / "absent.json", "--out", tmp_path / "bad"],
        capsys,
    )
    assert code == 2


def test_data_error_exit_code(tmp_path, capsys):
    data = tmp_path / "ragged.csv"
    data.write_text("a,b\n1,2\n3\n", encoding="utf-8")
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"a": "continuous", "b": "continuous"}), encoding="utf-8")
    code, _ = _run(["impute", "--input", data, "--schema", schema, *SHORT_CHAIN, "--out", tmp_path / "o"], capsys)
    assert code == 3


def _perfect_run(run_dir: Path, truth_path: Path, frames: int = 3) -> None:
    # values stay text so both files parse to identical floats
    truth = pd.read_csv(truth_path, dtype={"value": str}, keep_default_na=False)
    long = pd.concat([truth.assign(frame=k + 1) for k in range(frames)], ignore_index=True)
    (run_dir / "draws").mkdir(parents=True)
    long[["frame", "row", "column", "value"]].to_csv(run_dir / "draws" / "draws_long.csv", index=False)
    summary = truth.rename(columns={"value": "point"}).assign(lower=truth["value"], upper=truth["value"])
    summary.to_csv(run_dir / "summary.csv", index=False)


def test_evaluate_perfect_run(tmp_path, simulated, capsys):
    run_dir = tmp_path / "perfect"
    _perfect_run(run_dir, simulated["truth"])
    code, lines = _run(
        ["evaluate", "--truth", simulated["truth"], "--run", run_dir, "--input", simulated["masked"],
         "--schema", simulated["schema"]],
        capsys,
    )
    assert code == 0
    assert str(run_dir / "metrics.json") in lines
    reports = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert len(reports) == 1
    report = reports[0]
    assert report["rmse_mean"] == 0.0 and report["mae_all"] == 0.0
    assert report["coverage"] == 1.0 and report["percent_correct"] == 1.0
    tidy = pd.read_csv(run_dir / "metrics_tidy.csv")
    assert list(tidy.columns) == ["dataset", "variable", "metric", "value"]


def test_evaluate_after_impute_honours_level(tmp_path, simulated, capsys):
    run_dir = tmp_path / "run"
    code, _ = _run(
        ["impute", "--input", simulated["masked"], "--schema", simulated["schema"], *SHORT_CHAIN, "--out", run_dir],
        capsys,
    )
    assert code == 0
    external = tmp_path / "mean_fill.csv"
    truth = pd.read_csv(simulated["truth"])
    truth.assign(value=0.0).to_csv(external, index=False)
    code, _ = _run(
        ["evaluate", "--truth", simulated["truth"], "--run", run_dir, "--input", simulated["masked"],
         "--level", 0.5, "--external", external],
        capsys,
    )
    assert code == 0
    reports = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert [r["dataset"] for r in reports] == ["run", "mean_fill"]
    assert reports[0]["level"] == 0.5
    assert 0.0 <= reports[0]["coverage"] <= 1.0


def test_benchmark_grid(tmp_path, small_config, capsys, monkeypatch):
    timed = []
    real_time_chain = runner.time_chain
    monkeypatch.setattr(runner, "time_chain", lambda fn: timed.append(fn) or real_time_chain(fn))
    out = tmp_path / "bench"
    code, _ = _run(
        ["benchmark", "--replicates", 1, "--periods", 4, 5, 6, "--rhos", 0.5, *SHORT_CHAIN,
         "--config", small_config, "--out", out],
        capsys,
    )
    assert code == 0
    table = pd.read_csv(out / "benchmark.csv")
    assert len(table) == 3
    assert table["n_periods"].tolist() == [4, 5, 6]
    assert (table["status"] == "ok").all()
    assert (table["seconds"] > 0).all()
    assert len(json.loads((out / "metrics.json").read_text(encoding="utf-8"))) == 3
    assert len(timed) == 3


def test_benchmark_failed_cell_exit_code(tmp_path, small_config, capsys, monkeypatch):
    def broken(table, config, progress=None):
        raise NumericalError("Cholesky failed", iteration=1)

    monkeypatch.setattr(runner, "run_chain", broken)
    out = tmp_path / "bench"
    code, _ = _run(
        ["benchmark", "--periods", 4, "--rhos", 0.5, *SHORT_CHAIN, "--config", small_config, "--out", out],
        capsys,
    )
    assert code == 1
    table = pd.read_csv(out / "benchmark.csv")
    assert table["status"].tolist() == ["failed"]
    assert "iteration 1" in table["error"].iloc[0]
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["exit_code"] == 1


def test_regress(tmp_path, simulated, capsys):
    out = tmp_path / "reg"
    code, _ = _run(
        ["regress", "--input", simulated["masked"], "--schema", simulated["schema"], "--outcome", "V2",
         "--predictors", "V1", "V3", *SHORT_CHAIN, "--out", out],
        capsys,
    )
    assert code == 0
    summary = pd.read_csv(out / "posterior_summary.csv")
    assert summary["parameter"].tolist() == ["(Intercept)", "V1", "V3", "sigma2"]
    draws = pd.read_csv(out / "posterior_draws.csv")
    assert len(draws) == 5 * 4

    code, _ = _run(
        ["regress", "--input", simulated["masked"], "--schema", simulated["schema"], "--outcome", "V9",
         "--predictors", "V1", *SHORT_CHAIN, "--out", out],
        capsys,
    )
    assert code == 2


def test_output_root_comes_from_environment(tmp_path, small_config, capsys, monkeypatch):
    root = tmp_path / "env_root"
    monkeypatch.setenv("COPULA_OUTPUT_ROOT", str(root))
    fresh = get_fresh_settings()
    assert fresh.output_root == str(root)
    monkeypatch.setattr(runner, "settings", fresh)
    code, lines = _run(["simulate", "--replicates", 1, "--config", small_config], capsys)
    assert code == 0 and lines
    assert all(line.startswith(str(root / "simulate")) for line in lines)
    assert (root / "simulate" / "manifest.json").is_file()


def test_impute_keeps_user_columns_named_like_lags(tmp_path, capsys):
    rng = np.random.default_rng(11)
    gdp = rng.standard_normal(40)
    frame = pd.DataFrame({"gdp": gdp, "gdp_lag1": gdp + 0.5 * rng.standard_normal(40)})
    frame.loc[[3, 9, 17], "gdp"] = np.nan
    frame.loc[[5, 12, 30], "gdp_lag1"] = np.nan
    data = tmp_path / "gdp.csv"
    frame.to_csv(data, index=False)
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"gdp": "continuous", "gdp_lag1": "continuous"}), encoding="utf-8")

    out = tmp_path / "run"
    code, _ = _run(["impute", "--input", data, "--schema", schema, *SHORT_CHAIN, "--out", out], capsys)
    assert code == 0
    summary = pd.read_csv(out / "summary.csv")
    assert summary.groupby("column").size().to_dict() == {"gdp": 3, "gdp_lag1": 3}
