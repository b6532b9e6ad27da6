"""
Experiment orchestration: one (benchmark, noise, seed) run end to end, multi-seed
suites over joblib workers, metric aggregation and the gate-accuracy sweep.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed
from tqdm import tqdm

from . import storage
from .benchmarks import NGUYEN, DatasetSplits, get_benchmark, make_datasets
from .errors import GatedSRError
from .gating import binarize_gates, train_ngm
from .numerics import DATA_STREAM, NGM_STREAM, RngStream
from .schemas import AggregateMetrics, GateVector, NgmHyper, RunConfig, RunReport
from .trainer import PolicyTrainer

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "benchmark", "noise_count", "RR", "mean_EEN", "mean_NMSE", "EER", "seeds",
    "runs", "failures", "median_EEN", "invalid_nmse", "UEN_total", "EEN_total", "variant",
]


def _splits_match(splits: DatasetSplits, cfg: RunConfig) -> bool:
    spec = get_benchmark(cfg.benchmark, cfg.noise_count)
    rows = tuple(data.X.shape[0] for data in splits)
    return rows == cfg.data.sizes and all(data.X.shape[1] == spec.n_columns for data in splits)


def load_or_make_datasets(cfg: RunConfig, run_dir: Optional[Path] = None) -> DatasetSplits:
    if run_dir is not None:
        splits = storage.read_splits(run_dir)
        if splits is not None and _splits_match(splits, cfg):
            logger.debug("reusing datasets in %s", run_dir)
            return splits
        if splits is not None:
            logger.warning("datasets in %s do not match the configured sizes; regenerating", run_dir)
    spec = get_benchmark(cfg.benchmark, cfg.noise_count)
    return make_datasets(spec, cfg.data.sizes, RngStream(cfg.seed, DATA_STREAM))


def resolve_gates(cfg: RunConfig, splits: DatasetSplits, run_dir: Optional[Path] = None) -> GateVector:
    n_columns = splits.reward.X.shape[1]
    if not cfg.toggles.use_ngm:
        return GateVector.all_open(n_columns)
    gate_file = run_dir / storage.GATES_FILE if run_dir is not None else None
    if gate_file is not None and gate_file.exists():
        stored = storage.read_gates(gate_file)
        if stored.hyper == cfg.ngm and stored.seed == cfg.seed and len(stored.binary) == n_columns:
            return stored
        logger.info("gates in %s were trained with other settings; retraining", gate_file)
    gates = train_ngm(splits.ngm, cfg.ngm, RngStream(cfg.seed, NGM_STREAM))
    if gate_file is not None:
        storage.write_gates(gates, gate_file)
    return gates


def run_single(cfg: RunConfig, run_dir: Optional[Path] = None, **hooks) -> RunReport:
    """
    Datasets, gates and policy training for one configuration.

    With ``run_dir`` set, existing datasets and gates there are reused and the
    report, training log, best expression and policy checkpoint are written.
    """
    torch.set_num_threads(1)
    splits = load_or_make_datasets(cfg, run_dir)
    if run_dir is not None:
        storage.write_splits(splits, run_dir, force=True)
    gates = resolve_gates(cfg, splits, run_dir)

    trainer = PolicyTrainer(cfg.trainer, splits.reward, splits.eval, gates, cfg.seed, cfg.mask, cfg.toggles)
    if run_dir is not None:
        with storage.TrainingLog(run_dir / storage.LOG_FILE) as sink:
            report = trainer.run(log_sink=sink, **hooks)
    else:
        report = trainer.run(**hooks)

    report = report.model_copy(update={
        "benchmark": cfg.benchmark,
        "noise_count": cfg.noise_count,
        "toggles": cfg.toggles,
        "config_fingerprint": cfg.fingerprint(),
    })
    if run_dir is not None:
        storage.write_report(report, run_dir / storage.REPORT_FILE)
        storage.write_best(report, run_dir / storage.BEST_FILE)
        storage.save_policy(trainer.policy, run_dir / storage.POLICY_FILE)
    return report


def _failed_report(cfg: RunConfig, detail: str) -> RunReport:
    return RunReport(
        benchmark=cfg.benchmark,
        noise_count=cfg.noise_count,
        seed=cfg.seed,
        status="aborted",
        error=detail,
        toggles=cfg.toggles,
        config_fingerprint=cfg.fingerprint(),
    )


def _suite_task(cfg: RunConfig, run_dir: Optional[Path]) -> RunReport:
    try:
        return run_single(cfg, run_dir)
    except GatedSRError as exc:
        logger.error("%s seed %d failed: %s", cfg.benchmark, cfg.seed, exc.detail)
        report = _failed_report(cfg, exc.detail)
    except Exception as exc:
        logger.exception("%s seed %d crashed", cfg.benchmark, cfg.seed)
        report = _failed_report(cfg, f"{type(exc).__name__}: {exc}")
    if run_dir is not None:
        storage.write_report(report, run_dir / storage.REPORT_FILE)
    return report


# ===================== Aggregation =====================

def aggregate(reports: Sequence[RunReport]) -> AggregateMetrics:
    """
    Fold seed-ordered reports of one (benchmark, noise_count) setting.

    Aborted runs only count toward ``failures``. Unrecovered runs contribute
    their EEN to the EER denominator and nothing to its numerator.
    """
    if not reports:
        raise ValueError("aggregate needs at least one report")
    ordered = sorted(reports, key=lambda r: r.seed)
    done = [r for r in ordered if r.status == "completed"]
    een = np.array([r.een for r in done], dtype=np.float64)
    nmses = [r.eval_nmse for r in done if r.eval_nmse is not None]
    een_total = int(sum(r.een for r in done))
    uen_total = int(sum(r.uen for r in done if r.recovered))

    return AggregateMetrics(
        benchmark=ordered[0].benchmark or "",
        noise_count=ordered[0].noise_count,
        variant=ordered[0].toggles.label,
        runs=len(ordered),
        failures=len(ordered) - len(done),
        RR=float(np.mean([r.recovered for r in done])) if done else 0.0,
        mean_EEN=float(een.mean()) if een.size else 0.0,
        median_EEN=float(np.median(een)) if een.size else 0.0,
        mean_NMSE=float(np.mean(nmses)) if nmses else None,
        invalid_nmse=len(done) - len(nmses),
        UEN_total=uen_total,
        EEN_total=een_total,
        EER=uen_total / een_total if een_total else 0.0,
        seeds=";".join(str(r.seed) for r in ordered),
    )


def _benchmark_order(benchmark: Optional[str]) -> Tuple[int, str]:
    names = list(NGUYEN)
    return (names.index(benchmark), "") if benchmark in NGUYEN else (len(names), benchmark or "")


def aggregate_all(reports: Iterable[RunReport]) -> List[AggregateMetrics]:
    """One row per (benchmark, noise_count, ablation variant); the full method sorts first."""
    groups: Dict[Tuple[str, int, str], List[RunReport]] = {}
    for report in reports:
        groups.setdefault((report.benchmark or "", report.noise_count, report.toggles.variant), []).append(report)
    keys = sorted(groups, key=lambda k: (_benchmark_order(k[0]), k[1], k[2]))
    return [aggregate(groups[key]) for key in keys]


def summary_frame(reports: Iterable[RunReport]) -> pd.DataFrame:
    rows = [metrics.model_dump() for metrics in aggregate_all(reports)]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


# ===================== Suites =====================

class SuiteResult(NamedTuple):
    reports: List[RunReport]
    metrics: List[AggregateMetrics]


def run_suite(
    benchmarks: Sequence[str],
    noise_count: int,
    seeds: Sequence[int],
    cfg: RunConfig,
    jobs: int = 1,
    output_dir: Optional[Path] = None,
) -> SuiteResult:
    """
    Every (benchmark, seed) pair under ``cfg``. With ``output_dir`` set, a pair
    whose completed report on disk carries the same config fingerprint is
    loaded instead of re-run.
    """
    for benchmark in benchmarks:
        get_benchmark(benchmark)

    done: Dict[Tuple[str, int], RunReport] = {}
    pending = []
    for benchmark in benchmarks:
        for seed in seeds:
            run_cfg = cfg.model_copy(update={"benchmark": benchmark, "noise_count": noise_count, "seed": seed})
            run_dir = (
                storage.run_directory(output_dir, benchmark, noise_count, seed, cfg.toggles)
                if output_dir is not None else None
            )
            report_file = run_dir / storage.REPORT_FILE if run_dir is not None else None
            if report_file is not None and report_file.exists():
                existing = storage.read_report(report_file)
                if existing.status == "completed" and existing.config_fingerprint == run_cfg.fingerprint():
                    done[(benchmark, seed)] = existing
                    continue
                if existing.status == "completed":
                    logger.info("%s was produced under other settings; re-running", report_file)
            pending.append((run_cfg, run_dir))

    if done:
        logger.info("resuming: %d of %d runs already have reports", len(done), len(done) + len(pending))
    results = Parallel(n_jobs=jobs, return_as="generator")(
        delayed(_suite_task)(run_cfg, run_dir) for run_cfg, run_dir in pending
    )
    for report in tqdm(results, total=len(pending), desc=f"noise {noise_count}", unit="run"):
        done[(report.benchmark, report.seed)] = report

    reports = [done[(benchmark, seed)] for benchmark in benchmarks for seed in seeds]
    return SuiteResult(reports, aggregate_all(reports))


def is_perfect(gates: GateVector, noise_column_mask: Sequence[bool]) -> bool:
    """Keeps exactly the true variables; a fallback only counts on clean data."""
    mask = np.asarray(noise_column_mask, dtype=bool)
    if gates.fallback_applied and mask.any():
        return False
    return bool(np.array_equal(np.asarray(gates.binary, dtype=bool), ~mask))


def _gate_task(benchmark: str, noise_count: int, seed: int, hyper: NgmHyper, rows: int):
    torch.set_num_threads(1)
    spec = get_benchmark(benchmark, noise_count)
    splits = make_datasets(spec, (rows, 20, 20), RngStream(seed, DATA_STREAM))
    try:
        gates = train_ngm(splits.ngm, hyper, RngStream(seed, NGM_STREAM))
    except GatedSRError as exc:
        logger.error("%s noise %d seed %d: %s", benchmark, noise_count, seed, exc.detail)
        return None, splits.ngm.noise_column_mask
    return gates, splits.ngm.noise_column_mask


def ngm_accuracy_suite(
    benchmarks: Sequence[str],
    noise_counts: Sequence[int],
    seeds: Sequence[int],
    hyper: NgmHyper,
    otsu_scales: Optional[Sequence[float]] = None,
    lambda_values: Optional[Sequence[float]] = None,
    jobs: int = 1,
    rows: int = 20_000,
) -> pd.DataFrame:
    """
    Perfect-filter rate per (noise_count, otsu_scale, lambda_l0) setting.

    The NGM is trained once per lambda; each Otsu scale re-binarizes the same
    probabilities. Failed trainings count as imperfect.
    """
    otsu_scales = list(otsu_scales or [hyper.otsu_scale])
    lambda_values = list(lambda_values or [hyper.lambda_l0])
    tasks = [
        (benchmark, noise, seed, hyper.model_copy(update={"lambda_l0": lam}))
        for lam in lambda_values for noise in noise_counts for benchmark in benchmarks for seed in seeds
    ]
    outcomes = Parallel(n_jobs=jobs, return_as="generator")(
        delayed(_gate_task)(benchmark, noise, seed, task_hyper, rows) for benchmark, noise, seed, task_hyper in tasks
    )

    counts: Dict[Tuple[int, float, float], List[int]] = {}
    for (benchmark, noise, seed, task_hyper), (gates, mask) in tqdm(
        zip(tasks, outcomes), total=len(tasks), desc="gate accuracy", unit="fit"
    ):
        for scale in otsu_scales:
            key = (noise, scale, task_hyper.lambda_l0)
            perfect = False
            if gates is not None:
                binary, threshold, fallback = binarize_gates(gates.probabilities, scale)
                rebinned = gates.model_copy(update={
                    "binary": [bool(b) for b in binary], "threshold_used": threshold, "fallback_applied": fallback,
                })
                perfect = is_perfect(rebinned, mask)
            tally = counts.setdefault(key, [0, 0])
            tally[0] += 1
            tally[1] += int(perfect)

    rows_out = [
        {"noise_count": noise, "otsu_scale": scale, "lambda_l0": lam, "runs": runs, "perfect": perfect,
         "rate": perfect / runs}
        for (noise, scale, lam), (runs, perfect) in sorted(counts.items())
    ]
    return pd.DataFrame(rows_out, columns=["noise_count", "otsu_scale", "lambda_l0", "runs", "perfect", "rate"])
