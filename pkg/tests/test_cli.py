import pytest
from click.testing import CliRunner

from gatedsr import cli as cli_module
from gatedsr import storage
from gatedsr.cli import cli, parse_seeds
from gatedsr.errors import ConfigError, NgmTrainingError
from gatedsr.schemas import RunReport, Toggles

SMALL = [
    "--set", "data.ngm_rows=400",
    "--set", "ngm.epochs=2",
    "--set", "ngm.batch_size=64",
    "--set", "ngm.hidden_size=16",
    "--set", "trainer.batch_size=32",
    "--set", "trainer.max_expressions=64",
]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.mark.parametrize("text, seeds", [
    ("0-2", [0, 1, 2]),
    ("0,3,5", [0, 3, 5]),
    ("0-1,7", [0, 1, 7]),
])
def test_parse_seeds(text, seeds):
    assert parse_seeds(text) == seeds


@pytest.mark.parametrize("text", ["", "a-b", "-1"])
def test_parse_seeds_rejects(text):
    with pytest.raises(ConfigError):
        parse_seeds(text)


def test_gen_data_writes_and_refuses(runner, tmp_path):
    args = ["gen-data", "--benchmark", "Nguyen-9", "--noise", "2", "--seed", "7", "--out", str(tmp_path)] + SMALL
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    run_dir = storage.run_directory(tmp_path, "Nguyen-9", 2, 7)
    splits = storage.read_splits(run_dir)
    assert splits.ngm.X.shape == (400, 4)

    again = runner.invoke(cli, args)
    assert again.exit_code == 2
    assert "already exists" in again.output
    assert runner.invoke(cli, args + ["--force"]).exit_code == 0


def test_negative_noise_is_a_config_error(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--noise", "-1", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "❌" in result.output


def test_unknown_benchmark_is_a_config_error(runner, tmp_path):
    result = runner.invoke(cli, ["run", "--benchmark", "Nguyen-13", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_train_ngm_writes_gates(runner, tmp_path):
    result = runner.invoke(cli, ["train-ngm", "--benchmark", "Nguyen-9", "--noise", "1", "--out", str(tmp_path)] + SMALL)
    assert result.exit_code == 0, result.output
    gates = storage.read_gates(storage.run_directory(tmp_path, "Nguyen-9", 1, 0) / storage.GATES_FILE)
    assert len(gates.binary) == 3


def test_train_ngm_failure_exits_3(runner, tmp_path, monkeypatch):
    def failing(*args, **kwargs):
        raise NgmTrainingError("non-finite loss at epoch 1")

    monkeypatch.setattr(cli_module, "train_ngm", failing)
    result = runner.invoke(cli, ["train-ngm", "--noise", "1", "--out", str(tmp_path)] + SMALL)
    assert result.exit_code == 3
    assert "non-finite loss" in result.output


def test_run_writes_report(runner, tmp_path):
    result = runner.invoke(cli, ["run", "--out", str(tmp_path), "--no-ppo"] + SMALL)
    assert result.exit_code == 0, result.output
    run_dir = storage.run_directory(tmp_path, "Nguyen-1", 0, 0, Toggles(use_ppo=False))
    report = storage.read_report(run_dir / storage.REPORT_FILE)
    assert report.toggles.use_ppo is False
    assert report.een <= 64 + 32


def test_run_without_gating_keeps_full_run(runner, tmp_path):
    base = ["run", "--out", str(tmp_path), "--noise", "1"] + SMALL
    assert runner.invoke(cli, base).exit_code == 0
    full_dir = storage.run_directory(tmp_path, "Nguyen-1", 1, 0)
    full_report = (full_dir / storage.REPORT_FILE).read_text()

    result = runner.invoke(cli, base + ["--no-ngm"])
    assert result.exit_code == 0, result.output
    assert "ablation" in result.output
    ablation_dir = full_dir / "no-ngm"
    assert storage.read_report(ablation_dir / storage.REPORT_FILE).toggles.use_ngm is False
    assert not (ablation_dir / storage.GATES_FILE).exists()
    assert (full_dir / storage.REPORT_FILE).read_text() == full_report


def test_aborted_run_exits_3(runner, tmp_path, monkeypatch):
    def aborted(cfg, run_dir):
        return RunReport(seed=cfg.seed, status="aborted", error="no legal action at step 3")

    monkeypatch.setattr(cli_module, "run_single", aborted)
    result = runner.invoke(cli, ["run", "--out", str(tmp_path)] + SMALL)
    assert result.exit_code == 3
    assert "no legal action" in result.output


def test_bench_then_report(runner, tmp_path):
    out = tmp_path / "runs"
    args = ["bench", "--benchmarks", "Nguyen-1,Nguyen-9", "--seeds", "0-1", "--noise", "1", "--out", str(out)]
    result = runner.invoke(cli, args + SMALL)
    assert result.exit_code == 0, result.output
    summary = (out / storage.SUMMARY_FILE).read_text()
    assert summary.splitlines()[0].startswith("benchmark,noise_count,RR,mean_EEN,mean_NMSE,EER,seeds")
    assert summary.splitlines()[0].endswith(",variant")
    assert len(summary.splitlines()) == 3

    (out / storage.SUMMARY_FILE).unlink()
    rebuilt = runner.invoke(cli, ["report", str(out)])
    assert rebuilt.exit_code == 0, rebuilt.output
    assert (out / storage.SUMMARY_FILE).read_text() == summary


def test_report_without_runs(runner, tmp_path):
    result = runner.invoke(cli, ["report", str(tmp_path)])
    assert result.exit_code == 2
    assert "no report.json" in result.output


def test_gate_accuracy_writes_table(runner, tmp_path):
    args = [
        "gate-accuracy", "--out", str(tmp_path),
        "--set", "bench.benchmarks=[Nguyen-9]",
        "--set", "bench.noise_counts=[1]",
        "--set", "bench.seeds=[0]",
        "--set", "bench.otsu_scales=[1.0,1.05]",
    ] + SMALL
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "gate_accuracy.csv").read_text().splitlines()
    assert lines[0] == "noise_count,otsu_scale,lambda_l0,runs,perfect,rate"
    assert len(lines) == 3
