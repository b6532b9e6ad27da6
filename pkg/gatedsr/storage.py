"""Run directories and every file the tool reads or writes."""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import IO, List, Optional, Union

import joblib
import numpy as np
import pandas as pd
import torch

from .benchmarks import Dataset, DatasetSplits
from .errors import ConfigError
from .numerics import DTYPE
from .policy import PolicyNetwork
from .schemas import GateVector, IterationRecord, RunConfig, RunReport, Toggles

logger = logging.getLogger(__name__)

# ===================== PATHS (anchored to the repository root) =====================
BASE_DIR = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG = BASE_DIR / "configs" / "default.yaml"

SPLIT_FILES = ("ngm.csv", "reward.csv", "eval.csv")
COLUMNS_FILE = "columns.json"
GATES_FILE = "gates.json"
REPORT_FILE = "report.json"
LOG_FILE = "training_log.jsonl"
BEST_FILE = "best.txt"
POLICY_FILE = "policy.joblib"
SUMMARY_FILE = "summary.csv"

CHECKPOINT_VERSION = 1
FLOAT_FORMAT = "%.17g"

PathLike = Union[str, Path]


def run_directory(
    output_dir: PathLike, benchmark: str, noise_count: int, seed: int, toggles: Optional[Toggles] = None
) -> Path:
    """``<out>/<benchmark>/noise<k>/seed<s>``, plus an ablation subdirectory such as ``no-ngm``."""
    path = Path(output_dir) / benchmark / f"noise{noise_count}" / f"seed{seed}"
    if toggles is not None and toggles.variant:
        path = path / toggles.variant
    return path


def config_run_directory(cfg: RunConfig) -> Path:
    return run_directory(cfg.output_dir, cfg.benchmark, cfg.noise_count, cfg.seed, cfg.toggles)


def _write_atomic(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            write(handle)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def atomic_write_text(path: PathLike, text: str) -> None:
    _write_atomic(Path(path), lambda handle: handle.write(text.encode("utf-8")))


# ===================== Datasets =====================

def write_dataset(data: Dataset, path: PathLike) -> None:
    text = data.to_frame().to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    atomic_write_text(path, text)


def read_dataset(path: PathLike, noise_column_mask=None) -> Dataset:
    frame = pd.read_csv(path, float_precision="round_trip")
    return Dataset.from_frame(frame, noise_column_mask)


def write_splits(splits: DatasetSplits, directory: PathLike, force: bool = False) -> List[Path]:
    directory = Path(directory)
    targets = [directory / name for name in SPLIT_FILES]
    existing = [p for p in targets if p.exists()]
    if existing and not force:
        raise ConfigError(f"{existing[0]} already exists; pass --force to overwrite")
    for data, target in zip(splits, targets):
        write_dataset(data, target)
    mask = [bool(b) for b in splits.ngm.noise_column_mask]
    atomic_write_text(directory / COLUMNS_FILE, json.dumps({"noise_column_mask": mask}) + "\n")
    return targets


def read_splits(directory: PathLike) -> Optional[DatasetSplits]:
    directory = Path(directory)
    if not all((directory / name).exists() for name in SPLIT_FILES):
        return None
    mask = None
    if (directory / COLUMNS_FILE).exists():
        mask = json.loads((directory / COLUMNS_FILE).read_text())["noise_column_mask"]
    return DatasetSplits(*(read_dataset(directory / name, mask) for name in SPLIT_FILES))


# ===================== Gates, reports, logs =====================

def write_gates(gates: GateVector, path: PathLike) -> None:
    atomic_write_text(path, gates.model_dump_json(indent=2) + "\n")


def read_gates(path: PathLike) -> GateVector:
    return GateVector.model_validate_json(Path(path).read_text())


def write_report(report: RunReport, path: PathLike) -> None:
    atomic_write_text(path, report.model_dump_json() + "\n")


def read_report(path: PathLike) -> RunReport:
    return RunReport.model_validate_json(Path(path).read_text())


def collect_reports(root: PathLike) -> List[RunReport]:
    reports = [read_report(p) for p in sorted(Path(root).rglob(REPORT_FILE))]
    return sorted(reports, key=lambda r: (r.benchmark or "", r.noise_count, r.toggles.variant, r.seed))


def write_best(report: RunReport, path: PathLike) -> None:
    atomic_write_text(path, f"{report.best_traversal}\n{report.best_infix}\n")


def write_frame(frame: pd.DataFrame, path: PathLike) -> None:
    atomic_write_text(path, frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))


class TrainingLog:
    """Line-delimited IterationRecord sink; truncates the file on open."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle: Optional[IO[str]] = open(self.path, "w", encoding="utf-8")

    def __call__(self, record: IterationRecord) -> None:
        self._handle.write(record.model_dump_json() + "\n")
        self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ===================== Policy checkpoints =====================

def save_policy(net: PolicyNetwork, path: PathLike) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "n_tokens": net.n_tokens,
        "hidden_size": net.hidden_size,
        "blocks": {name: tensor.detach().numpy().copy() for name, tensor in net.state_dict().items()},
    }
    _write_atomic(Path(path), lambda handle: joblib.dump(payload, handle))


def load_policy(path: PathLike) -> PolicyNetwork:
    payload = joblib.load(path)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported policy checkpoint version {version!r} in {path}")
    net = PolicyNetwork(payload["n_tokens"], payload["hidden_size"])
    expected = net.state_dict()
    blocks = payload["blocks"]
    if set(blocks) != set(expected):
        raise ConfigError(f"checkpoint {path} has blocks {sorted(blocks)}, expected {sorted(expected)}")
    for name, array in blocks.items():
        if tuple(array.shape) != tuple(expected[name].shape):
            raise ConfigError(f"checkpoint block {name} has shape {array.shape}, expected {tuple(expected[name].shape)}")
    net.load_state_dict({name: torch.as_tensor(np.asarray(array), dtype=DTYPE) for name, array in blocks.items()})
    return net
