import math

import pytest

from gatedsr import experiments, storage
from gatedsr.errors import ConfigError, NgmTrainingError
from gatedsr.experiments import (
    SUMMARY_COLUMNS,
    aggregate,
    aggregate_all,
    is_perfect,
    ngm_accuracy_suite,
    run_single,
    run_suite,
    summary_frame,
)
from gatedsr.schemas import GateVector, NgmHyper, RunConfig, RunReport, Toggles


def _report(seed, benchmark="Nguyen-1", noise=0, **fields):
    return RunReport(benchmark=benchmark, noise_count=noise, seed=seed, **fields)


def _gates(bits, fallback=False):
    return GateVector(
        probabilities=[0.9 if b else 0.1 for b in bits],
        binary=[bool(b) for b in bits] if not fallback else [True] * len(bits),
        threshold_used=0.5,
        fallback_applied=fallback,
    )


# ===================== aggregation =====================

def test_aggregate_hand_computed():
    reports = [
        _report(3, status="aborted", error="boom"),
        _report(1, een=300, uen=200, eval_nmse=0.5),
        _report(0, recovered=True, een=100, uen=40, eval_nmse=0.0),
        _report(2, een=200, uen=150, eval_invalid=True),
    ]
    metrics = aggregate(reports)
    assert metrics.runs == 4 and metrics.failures == 1
    assert metrics.RR == pytest.approx(1 / 3)
    assert metrics.mean_EEN == 200.0 and metrics.median_EEN == 200.0
    assert metrics.mean_NMSE == pytest.approx(0.25)
    assert metrics.invalid_nmse == 1
    assert (metrics.UEN_total, metrics.EEN_total) == (40, 600)
    assert metrics.EER == pytest.approx(40 / 600)
    assert metrics.seeds == "0;1;2;3"


def test_aggregate_without_recoveries_has_zero_eer():
    metrics = aggregate([_report(0, een=50, uen=50), _report(1, een=50, uen=49)])
    assert metrics.RR == 0.0
    assert metrics.EER == 0.0
    assert metrics.mean_NMSE is None
    assert metrics.invalid_nmse == 2


def test_aggregate_all_failed():
    metrics = aggregate([_report(0, status="aborted"), _report(1, status="aborted")])
    assert metrics.failures == 2
    assert (metrics.RR, metrics.mean_EEN, metrics.EER) == (0.0, 0.0, 0.0)


def test_aggregate_needs_reports():
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_all_groups_in_suite_order():
    reports = [
        _report(0, benchmark="Nguyen-10", noise=3),
        _report(0, benchmark="Nguyen-2", noise=3),
        _report(0, benchmark="Nguyen-2", noise=1),
        _report(1, benchmark="Nguyen-2", noise=3),
    ]
    keys = [(m.benchmark, m.noise_count, m.runs) for m in aggregate_all(reports)]
    assert keys == [("Nguyen-2", 1, 1), ("Nguyen-2", 3, 2), ("Nguyen-10", 3, 1)]


def test_summary_frame_columns():
    frame = summary_frame([_report(0, recovered=True, een=10, uen=5, eval_nmse=0.0)])
    assert list(frame.columns) == SUMMARY_COLUMNS
    row = frame.iloc[0]
    assert (row.benchmark, row.RR, row.EER, row.variant) == ("Nguyen-1", 1.0, 0.5, "full")


def test_ablations_get_their_own_rows():
    reports = [
        _report(0, een=10, uen=5, recovered=True, eval_nmse=0.0),
        _report(0, een=40, uen=30, toggles=Toggles(use_ngm=False)),
        _report(1, een=50, uen=30, toggles=Toggles(use_ngm=False)),
    ]
    rows = [(m.variant, m.runs, m.RR) for m in aggregate_all(reports)]
    assert rows == [("full", 1, 1.0), ("no-ngm", 2, 0.0)]


# ===================== gate scoring =====================

@pytest.mark.parametrize("bits, fallback, mask, expected", [
    ([1, 0, 0], False, [False, True, True], True),
    ([1, 1, 0], False, [False, True, True], False),
    ([0, 1, 0], False, [False, True, True], False),
    ([1, 1, 1], True, [False, True, True], False),
    ([1], True, [False], True),
])
def test_is_perfect(bits, fallback, mask, expected):
    assert is_perfect(_gates(bits, fallback), mask) is expected


# ===================== single runs =====================

def test_run_single_writes_artifacts(small_config, tmp_path):
    run_dir = tmp_path / "run"
    report = run_single(small_config, run_dir)
    for name in storage.SPLIT_FILES + (storage.COLUMNS_FILE, storage.GATES_FILE, storage.REPORT_FILE,
                                       storage.LOG_FILE, storage.BEST_FILE, storage.POLICY_FILE):
        assert (run_dir / name).exists(), name

    assert report.benchmark == "Nguyen-1"
    assert report.config_fingerprint == small_config.fingerprint()
    assert storage.read_report(run_dir / storage.REPORT_FILE) == report
    log_lines = (run_dir / storage.LOG_FILE).read_text().splitlines()
    assert len(log_lines) == report.iterations - int(report.recovered)
    assert (run_dir / storage.BEST_FILE).read_text().splitlines() == [report.best_traversal, report.best_infix]
    assert storage.read_gates(run_dir / storage.GATES_FILE).fallback_applied
    assert storage.load_policy(run_dir / storage.POLICY_FILE).hidden_size == small_config.trainer.hidden_size


def test_run_single_reuses_datasets_and_gates(small_config, tmp_path):
    run_dir = tmp_path / "run"
    first = run_single(small_config, run_dir)
    data_before = (run_dir / "reward.csv").read_bytes()
    second = run_single(small_config, run_dir)
    assert (run_dir / "reward.csv").read_bytes() == data_before
    assert first.model_dump(exclude={"wall_time"}) == second.model_dump(exclude={"wall_time"})


def test_run_single_without_gating(small_config, tmp_path):
    cfg = small_config.model_copy(update={
        "noise_count": 2,
        "toggles": small_config.toggles.model_copy(update={"use_ngm": False}),
    })
    run_dir = tmp_path / "run"
    report = run_single(cfg, run_dir)
    assert report.gate_binary == [True, True, True]
    assert not (run_dir / storage.GATES_FILE).exists()
    assert report.toggles.use_ngm is False


def test_run_single_retrains_gates_under_new_settings(small_config, tmp_path):
    run_dir = tmp_path / "run"
    run_single(small_config, run_dir)
    changed = small_config.model_copy(update={
        "ngm": small_config.ngm.model_copy(update={"otsu_scale": 0.5, "lambda_l0": 5.0}),
    })
    run_single(changed, run_dir)
    gates = storage.read_gates(run_dir / storage.GATES_FILE)
    assert gates.hyper == changed.ngm


def test_run_single_regenerates_mismatched_datasets(small_config, tmp_path):
    run_dir = tmp_path / "run"
    run_single(small_config, run_dir)
    changed = small_config.model_copy(update={"data": small_config.data.model_copy(update={"ngm_rows": 300})})
    run_single(changed, run_dir)
    assert storage.read_splits(run_dir).ngm.X.shape == (300, 1)


def test_run_single_with_per_batch_gates(small_config, tmp_path):
    ngm = small_config.ngm.model_copy(update={
        "gate_sampling": "per_batch", "log_alpha_init_mean": 1.0, "log_alpha_init_std": 0.1,
    })
    cfg = small_config.model_copy(update={"benchmark": "Nguyen-9", "noise_count": 2, "ngm": ngm})
    run_dir = tmp_path / "run"
    report = run_single(cfg, run_dir)
    assert report.status == "completed"
    gates = storage.read_gates(run_dir / storage.GATES_FILE)
    assert gates.hyper.gate_sampling == "per_batch"
    assert report.gate_binary == gates.binary and len(gates.binary) == 4


def test_suite_task_records_failures(monkeypatch, small_config, tmp_path):
    def failing(cfg, run_dir):
        raise NgmTrainingError("gating network diverged")

    monkeypatch.setattr(experiments, "run_single", failing)
    report = experiments._suite_task(small_config, tmp_path)
    assert report.status == "aborted"
    assert report.error == "gating network diverged"
    assert storage.read_report(tmp_path / storage.REPORT_FILE) == report


def test_suite_task_records_crashes(monkeypatch, small_config):
    def crashing(cfg, run_dir):
        raise RuntimeError("boom")

    monkeypatch.setattr(experiments, "run_single", crashing)
    assert experiments._suite_task(small_config, None).error == "RuntimeError: boom"


# ===================== suites =====================

def test_run_suite_layout_and_metrics(small_config, tmp_path):
    out = tmp_path / "runs"
    result = run_suite(["Nguyen-1", "Nguyen-9"], 2, [0, 1], small_config, output_dir=out)
    assert [(r.benchmark, r.seed) for r in result.reports] == [
        ("Nguyen-1", 0), ("Nguyen-1", 1), ("Nguyen-9", 0), ("Nguyen-9", 1),
    ]
    assert [m.benchmark for m in result.metrics] == ["Nguyen-1", "Nguyen-9"]
    for report in result.reports:
        assert report.noise_count == 2
        assert (storage.run_directory(out, report.benchmark, 2, report.seed) / storage.REPORT_FILE).exists()
    assert len(storage.collect_reports(out)) == 4


def test_run_suite_resumes_completed_runs(monkeypatch, small_config, tmp_path):
    out = tmp_path / "runs"
    first = run_suite(["Nguyen-1"], 0, [0, 1], small_config, output_dir=out)

    aborted = first.reports[1].model_copy(update={"status": "aborted", "error": "killed"})
    storage.write_report(aborted, storage.run_directory(out, "Nguyen-1", 0, 1) / storage.REPORT_FILE)

    calls = []

    def rerun(cfg, run_dir):
        calls.append(cfg.seed)
        return first.reports[1]

    monkeypatch.setattr(experiments, "_suite_task", rerun)
    second = run_suite(["Nguyen-1"], 0, [0, 1], small_config, output_dir=out)
    assert calls == [1]
    assert second.reports[0] == first.reports[0]


def test_ablation_suite_does_not_reuse_full_runs(small_config, tmp_path):
    out = tmp_path / "runs"
    full = run_suite(["Nguyen-1"], 2, [0], small_config, output_dir=out)
    ablation_cfg = small_config.model_copy(update={"toggles": Toggles(use_ngm=False)})
    ablation = run_suite(["Nguyen-1"], 2, [0], ablation_cfg, output_dir=out)

    assert ablation.reports[0].toggles.use_ngm is False
    assert ablation.reports[0].gate_binary == [True, True, True]
    full_dir = storage.run_directory(out, "Nguyen-1", 2, 0)
    ablation_dir = storage.run_directory(out, "Nguyen-1", 2, 0, Toggles(use_ngm=False))
    assert ablation_dir == full_dir / "no-ngm"
    assert storage.read_report(full_dir / storage.REPORT_FILE) == full.reports[0]
    assert storage.read_report(ablation_dir / storage.REPORT_FILE) == ablation.reports[0]
    assert [m.variant for m in aggregate_all(storage.collect_reports(out))] == ["full", "no-ngm"]


def test_run_suite_reruns_reports_from_other_settings(monkeypatch, small_config, tmp_path):
    out = tmp_path / "runs"
    run_suite(["Nguyen-1"], 0, [0], small_config, output_dir=out)
    changed = small_config.model_copy(update={
        "trainer": small_config.trainer.model_copy(update={"batch_size": 16}),
    })
    calls = []

    def rerun(cfg, run_dir):
        calls.append(cfg.fingerprint())
        return RunReport(benchmark=cfg.benchmark, seed=cfg.seed, config_fingerprint=cfg.fingerprint())

    monkeypatch.setattr(experiments, "_suite_task", rerun)
    run_suite(["Nguyen-1"], 0, [0], changed, output_dir=out)
    assert calls == [changed.fingerprint()]
    assert changed.fingerprint() != small_config.fingerprint()


def test_suite_is_identical_across_job_counts(small_config, tmp_path):
    serial = run_suite(["Nguyen-1", "Nguyen-9"], 2, [0, 1], small_config, jobs=1, output_dir=tmp_path / "a")
    parallel = run_suite(["Nguyen-1", "Nguyen-9"], 2, [0, 1], small_config, jobs=2, output_dir=tmp_path / "b")
    for left, right in zip(serial.reports, parallel.reports):
        assert left.model_copy(update={"wall_time": 0.0}).model_dump_json() == right.model_copy(
            update={"wall_time": 0.0}
        ).model_dump_json()
        run_dir = storage.run_directory(tmp_path / "a", left.benchmark, 2, left.seed)
        other = storage.run_directory(tmp_path / "b", right.benchmark, 2, right.seed)
        for name in (storage.LOG_FILE, storage.GATES_FILE, "reward.csv"):
            assert (run_dir / name).read_bytes() == (other / name).read_bytes(), name


def test_run_suite_rejects_unknown_benchmark(small_config):
    with pytest.raises(ConfigError):
        run_suite(["Nguyen-99"], 0, [0], small_config)


def test_gate_accuracy_trains_once_per_lambda(monkeypatch, small_hyper):
    calls = []
    real = experiments.train_ngm

    def counting(data, hyper, rng):
        calls.append(hyper.lambda_l0)
        return real(data, hyper, rng)

    monkeypatch.setattr(experiments, "train_ngm", counting)
    frame = ngm_accuracy_suite(["Nguyen-9"], [1], [0, 1], small_hyper, otsu_scales=[1.0, 1.05],
                               lambda_values=[0.25, 0.5], rows=400)
    assert sorted(calls) == [0.25, 0.25, 0.5, 0.5]
    assert list(frame.columns) == ["noise_count", "otsu_scale", "lambda_l0", "runs", "perfect", "rate"]
    assert len(frame) == 4
    assert (frame.runs == 2).all()
    for row in frame.itertuples(index=False):
        assert math.isclose(row.rate, row.perfect / row.runs)


def test_gate_accuracy_counts_failed_fits(monkeypatch, small_hyper):
    def failing(data, hyper, rng):
        raise NgmTrainingError("non-finite loss")

    monkeypatch.setattr(experiments, "train_ngm", failing)
    frame = ngm_accuracy_suite(["Nguyen-1"], [2], [0], small_hyper, rows=400)
    assert frame.perfect.tolist() == [0]
    assert frame.rate.tolist() == [0.0]


# ===================== full scale =====================

@pytest.mark.slow
def test_gating_beats_no_gating_on_noisy_nguyen1(tmp_path):
    cfg = RunConfig.model_validate({"trainer": {"max_expressions": 400_000}})
    seeds = list(range(5))
    gated = run_suite(["Nguyen-1"], 10, seeds, cfg, output_dir=tmp_path).metrics[0]
    ablation_cfg = cfg.model_copy(update={"toggles": Toggles(use_ngm=False)})
    ungated = run_suite(["Nguyen-1"], 10, seeds, ablation_cfg, output_dir=tmp_path).metrics[0]
    assert gated.RR > ungated.RR or ungated.median_EEN >= 2 * gated.median_EEN


@pytest.mark.slow
def test_perfect_filter_rate():
    hyper = NgmHyper()
    benchmarks = ["Nguyen-1", "Nguyen-5", "Nguyen-9", "Nguyen-12"]
    frame = ngm_accuracy_suite(benchmarks, [3, 5, 10], range(5), hyper)
    assert frame.perfect.sum() / frame.runs.sum() >= 0.8
    wide = ngm_accuracy_suite(benchmarks, [20], range(5), hyper)
    assert wide.perfect.sum() / wide.runs.sum() >= 0.7
