"""
Command-line entry point.

    python -m gatedsr gen-data --benchmark Nguyen-1 --noise 10 --seed 7
    python -m gatedsr train-ngm --benchmark Nguyen-2 --noise 10
    python -m gatedsr run --benchmark Nguyen-1 --seed 0
    python -m gatedsr bench --noise 10 --jobs 8
    python -m gatedsr report runs/
    python -m gatedsr gate-accuracy --jobs 8
"""
import functools
import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import storage
from .benchmarks import get_benchmark, make_datasets
from .config import load_config, validate_config
from .errors import ConfigError, GatedSRError, RUNTIME_ABORT_EXIT
from .experiments import load_or_make_datasets, ngm_accuracy_suite, run_single, run_suite, summary_frame
from .gating import train_ngm
from .numerics import DATA_STREAM, NGM_STREAM, RngStream
from .schemas import RunConfig


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


def parse_seeds(text: str) -> List[int]:
    """'0-9' or '0,3,5' or a mix: '0-2,7'."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                low, high = (int(x) for x in part.split("-", 1))
                seeds.extend(range(low, high + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot parse seed list {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f"seed list {text!r} must name non-negative seeds")
    return seeds


def handle_errors(command):
    """Map domain failures to exit codes: 2 for configuration, 3 for runtime aborts."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except GatedSRError as exc:
            click.echo(f"❌ {exc.detail}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def run_options(command):
    """Options shared by every command that resolves a RunConfig."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="YAML profile (default: configs/default.yaml)."),
        click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                     help="Override one config value; repeatable."),
        click.option("--benchmark", default=None, help="Benchmark id, e.g. Nguyen-9."),
        click.option("--noise", "noise_count", type=int, default=None, help="Number of noise columns."),
        click.option("--seed", type=int, default=None, help="Master seed."),
        click.option("--out", "output_dir", default=None, help="Output directory."),
        click.option("--no-ngm", is_flag=True, help="Disable the gating network (all variables open)."),
        click.option("--no-path-entropy", is_flag=True, help="Drop the path-entropy bonus."),
        click.option("--no-ppo", is_flag=True, help="Plain policy gradient instead of the clipped surrogate."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def resolve_config(
    config_path: Optional[str],
    overrides,
    benchmark: Optional[str],
    noise_count: Optional[int],
    seed: Optional[int],
    output_dir: Optional[str],
    no_ngm: bool,
    no_path_entropy: bool,
    no_ppo: bool,
) -> RunConfig:
    cfg = load_config(config_path, overrides)
    data = cfg.model_dump()
    for key, value in (("benchmark", benchmark), ("noise_count", noise_count), ("seed", seed), ("output_dir", output_dir)):
        if value is not None:
            data[key] = value
    if no_ngm:
        data["toggles"]["use_ngm"] = False
    if no_path_entropy:
        data["toggles"]["use_path_entropy"] = False
    if no_ppo:
        data["toggles"]["use_ppo"] = False
    cfg = validate_config(data)
    get_benchmark(cfg.benchmark)
    return cfg


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool):
    """Symbolic regression with noise-column gating and a risk-seeking policy."""
    setup_logging(verbose)


@cli.command("gen-data")
@run_options
@click.option("--force", is_flag=True, help="Overwrite existing dataset files.")
@handle_errors
def gen_data(force: bool, **options):
    """Write the NGM, reward and evaluation CSVs for one benchmark and seed."""
    cfg = resolve_config(**options)
    spec = get_benchmark(cfg.benchmark, cfg.noise_count)
    run_dir = storage.config_run_directory(cfg)
    splits = make_datasets(spec, cfg.data.sizes, RngStream(cfg.seed, DATA_STREAM))
    for path in storage.write_splits(splits, run_dir, force=force):
        click.echo(f"✅ {path}")


@cli.command("train-ngm")
@run_options
@handle_errors
def train_ngm_command(**options):
    """Train the gating network and write gates.json."""
    cfg = resolve_config(**options)
    run_dir = storage.config_run_directory(cfg)
    splits = load_or_make_datasets(cfg, run_dir)
    gates = train_ngm(splits.ngm, cfg.ngm, RngStream(cfg.seed, NGM_STREAM))
    storage.write_gates(gates, run_dir / storage.GATES_FILE)

    columns = splits.ngm.columns
    kept = [columns[j] for j in gates.kept]
    dropped = [c for j, c in enumerate(columns) if not gates.binary[j]]
    if gates.fallback_applied:
        click.echo(f"⚠️ fallback applied: no variable passed threshold {gates.threshold_used:.4f}, keeping all {len(columns)}")
    else:
        click.echo(f"✅ kept: {', '.join(kept)}")
        click.echo(f"   dropped: {', '.join(dropped) or '-'}")
    click.echo(f"   gates written to {run_dir / storage.GATES_FILE}")


@cli.command("run")
@run_options
@handle_errors
def run_command(**options):
    """Train the policy for one benchmark and seed and write its report."""
    cfg = resolve_config(**options)
    run_dir = storage.config_run_directory(cfg)
    report = run_single(cfg, run_dir)

    if not cfg.toggles.use_ngm:
        click.echo("⚠️ ablation: gating network disabled")
    if report.status == "aborted":
        click.echo(f"❌ run aborted: {report.error}", err=True)
        sys.exit(RUNTIME_ABORT_EXIT)
    mark = "✅ recovered" if report.recovered else "⚠️ not recovered"
    click.echo(f"{mark}: {report.best_infix}")
    click.echo(f"   EEN {report.een}, UEN {report.uen}, eval NMSE {report.eval_nmse}")
    click.echo(f"   report written to {run_dir / storage.REPORT_FILE}")


@cli.command("bench")
@run_options
@click.option("--benchmarks", "benchmark_list", default=None, help="Comma-separated ids (default: config bench.benchmarks).")
@click.option("--seeds", "seed_list", default=None, help="Seeds, e.g. 0-9 or 0,3,5 (default: config bench.seeds).")
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Parallel runs.")
@handle_errors
def bench_command(benchmark_list: Optional[str], seed_list: Optional[str], jobs: Optional[int], **options):
    """Run a multi-seed suite and write summary.csv; existing reports are reused."""
    cfg = resolve_config(**options)
    benchmarks = [b.strip() for b in benchmark_list.split(",")] if benchmark_list else cfg.bench.benchmarks
    seeds = parse_seeds(seed_list) if seed_list else cfg.bench.seeds
    output_dir = Path(cfg.output_dir)

    result = run_suite(benchmarks, cfg.noise_count, seeds, cfg, jobs or cfg.bench.jobs, output_dir)
    frame = summary_frame(storage.collect_reports(output_dir))
    storage.write_frame(frame, output_dir / storage.SUMMARY_FILE)
    failures = sum(m.failures for m in result.metrics)
    if failures:
        click.echo(f"⚠️ {failures} runs failed; see their report.json files")
    print_summary(frame)
    click.echo(f"✅ {len(result.reports)} runs, summary written to {output_dir / storage.SUMMARY_FILE}")


@cli.command("report")
@click.argument("directory", type=click.Path(exists=True, file_okay=False), default="runs")
@handle_errors
def report_command(directory: str):
    """Rebuild summary.csv from the report files under DIRECTORY."""
    reports = storage.collect_reports(directory)
    if not reports:
        raise ConfigError(f"no {storage.REPORT_FILE} files under {directory}")
    frame = summary_frame(reports)
    storage.write_frame(frame, Path(directory) / storage.SUMMARY_FILE)
    print_summary(frame)
    click.echo(f"✅ {len(reports)} reports, summary written to {Path(directory) / storage.SUMMARY_FILE}")


@cli.command("gate-accuracy")
@run_options
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Parallel fits.")
@handle_errors
def gate_accuracy_command(jobs: Optional[int], **options):
    """Perfect-filter rate of the gating network per noise level, Otsu scale and lambda."""
    cfg = resolve_config(**options)
    frame = ngm_accuracy_suite(
        cfg.bench.benchmarks,
        cfg.bench.noise_counts,
        cfg.bench.seeds,
        cfg.ngm,
        otsu_scales=cfg.bench.otsu_scales,
        lambda_values=cfg.bench.lambda_l0_values,
        jobs=jobs or cfg.bench.jobs,
        rows=cfg.data.ngm_rows,
    )
    target = Path(cfg.output_dir) / "gate_accuracy.csv"
    storage.write_frame(frame, target)

    table = Table(title="Gate accuracy")
    for column in frame.columns:
        table.add_column(column, justify="right")
    for row in frame.itertuples(index=False):
        table.add_row(str(row.noise_count), f"{row.otsu_scale:g}", f"{row.lambda_l0:g}",
                      str(row.runs), str(row.perfect), f"{row.rate:.2%}")
    Console().print(table)
    click.echo(f"✅ written to {target}")


def print_summary(frame) -> None:
    table = Table(title="Summary")
    for column in ("benchmark", "noise", "variant", "RR", "mean EEN", "mean NMSE", "EER", "runs", "failed"):
        table.add_column(column, justify="right")
    for row in frame.itertuples(index=False):
        nmse = "n/a" if row.mean_NMSE is None or row.mean_NMSE != row.mean_NMSE else f"{row.mean_NMSE:.3g}"
        table.add_row(
            row.benchmark, str(row.noise_count), row.variant, f"{row.RR:.0%}", f"{row.mean_EEN:,.0f}",
            nmse, f"{row.EER:.3f}", str(row.runs), str(row.failures),
        )
    Console().print(table)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
