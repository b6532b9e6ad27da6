"""
Nguyen benchmark suite: ground truths, noise-column injection and the
three-way dataset protocol (NGM set, reward set, evaluation set).
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError
from .expressions import TokenLibrary, Traversal, evaluate
from .numerics import RngStream

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12
MAX_RESAMPLES = 10


@dataclass(frozen=True)
class BenchmarkSpec:
    id: str
    expression: str
    variable_count: int
    low: float
    high: float
    ground_truth: Callable[[np.ndarray], np.ndarray]
    reference: str  # the target in the search library, constants built from x/x
    noise_count: int = 0

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"{self.id}: range low {self.low} must be below high {self.high}")
        if self.noise_count < 0:
            raise ValueError(f"{self.id}: noise_count must be non-negative")

    @property
    def n_columns(self) -> int:
        return self.variable_count + self.noise_count

    def with_noise(self, noise_count: int) -> "BenchmarkSpec":
        return replace(self, noise_count=noise_count)


def _x(X: np.ndarray, j: int) -> np.ndarray:
    return X[:, j]


NGUYEN: Dict[str, BenchmarkSpec] = {
    spec.id: spec
    for spec in [
        BenchmarkSpec(
            "Nguyen-1", "x1^3 + x1^2 + x1", 1, -1.0, 1.0,
            lambda X: _x(X, 0) ** 3 + _x(X, 0) ** 2 + _x(X, 0),
            "add add mul mul x1 x1 x1 mul x1 x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-2", "x1^4 + x1^3 + x1^2 + x1", 1, -1.0, 1.0,
            lambda X: _x(X, 0) ** 4 + _x(X, 0) ** 3 + _x(X, 0) ** 2 + _x(X, 0),
            "add add add mul mul mul x1 x1 x1 x1 mul mul x1 x1 x1 mul x1 x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-3", "x1^5 + x1^4 + x1^3 + x1^2 + x1", 1, -1.0, 1.0,
            lambda X: _x(X, 0) ** 5 + _x(X, 0) ** 4 + _x(X, 0) ** 3 + _x(X, 0) ** 2 + _x(X, 0),
            "add add add add mul mul mul mul x1 x1 x1 x1 x1 mul mul mul x1 x1 x1 x1 "
            "mul mul x1 x1 x1 mul x1 x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-4", "x1^6 + x1^5 + x1^4 + x1^3 + x1^2 + x1", 1, -1.0, 1.0,
            lambda X: _x(X, 0) ** 6 + _x(X, 0) ** 5 + _x(X, 0) ** 4 + _x(X, 0) ** 3 + _x(X, 0) ** 2 + _x(X, 0),
            # (x^3 + 1) * (x^3 + x^2 + x)
            "mul add add mul mul x1 x1 x1 mul x1 x1 x1 add mul mul x1 x1 x1 div x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-5", "sin(x1^2) * cos(x1) - 1", 1, -1.0, 1.0,
            lambda X: np.sin(_x(X, 0) ** 2) * np.cos(_x(X, 0)) - 1.0,
            "sub mul sin mul x1 x1 cos x1 div x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-6", "sin(x1) + sin(x1 + x1^2)", 1, -1.0, 1.0,
            lambda X: np.sin(_x(X, 0)) + np.sin(_x(X, 0) + _x(X, 0) ** 2),
            "add sin x1 sin add x1 mul x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-7", "log(x1 + 1) + sin(x1^2 + 1)", 1, -1.0, 1.0,
            lambda X: np.log(_x(X, 0) + 1.0) + np.sin(_x(X, 0) ** 2 + 1.0),
            "add log add x1 div x1 x1 sin add mul x1 x1 div x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-8", "sqrt(x1)", 1, 0.0, 4.0,
            lambda X: np.sqrt(_x(X, 0)),
            "exp div log x1 add div x1 x1 div x1 x1",
        ),
        BenchmarkSpec(
            "Nguyen-9", "sin(x1) + sin(x2^2)", 2, 0.0, 1.0,
            lambda X: np.sin(_x(X, 0)) + np.sin(_x(X, 1) ** 2),
            "add sin x1 sin mul x2 x2",
        ),
        BenchmarkSpec(
            "Nguyen-10", "2 * sin(x1) * cos(x2)", 2, 0.0, 1.0,
            lambda X: 2.0 * np.sin(_x(X, 0)) * np.cos(_x(X, 1)),
            "add mul sin x1 cos x2 mul sin x1 cos x2",
        ),
        BenchmarkSpec(
            "Nguyen-11", "x1^x2", 2, 0.0, 1.0,
            lambda X: np.exp(_x(X, 1) * np.log(_x(X, 0))),
            "exp mul x2 log x1",
        ),
        BenchmarkSpec(
            "Nguyen-12", "x1^4 - x1^3 + 0.5 * x2^2 - x2", 2, 0.0, 1.0,
            lambda X: _x(X, 0) ** 4 - _x(X, 0) ** 3 + 0.5 * _x(X, 1) ** 2 - _x(X, 1),
            "sub add sub mul mul mul x1 x1 x1 x1 mul mul x1 x1 x1 "
            "div mul x2 x2 add div x2 x2 div x2 x2 x2",
        ),
    ]
}


def get_benchmark(benchmark_id: str, noise_count: int = 0) -> BenchmarkSpec:
    try:
        spec = NGUYEN[benchmark_id]
    except KeyError:
        raise ConfigError(f"unknown benchmark {benchmark_id!r}; expected one of {', '.join(NGUYEN)}") from None
    return spec.with_noise(noise_count)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    noise_column_mask: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} do not line up")
        if self.noise_column_mask.shape != (self.X.shape[1],):
            raise ValueError("noise_column_mask must have one entry per column")

    @property
    def sigma_y(self) -> float:
        return float(np.std(self.y))

    @property
    def columns(self):
        return [f"x{j + 1}" for j in range(self.X.shape[1])]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=self.columns)
        frame["y"] = self.y
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, noise_column_mask=None) -> "Dataset":
        features = [c for c in frame.columns if c != "y"]
        X = frame[features].to_numpy(dtype=np.float64)
        mask = np.zeros(len(features), dtype=bool) if noise_column_mask is None else np.asarray(noise_column_mask, dtype=bool)
        return cls(X, frame["y"].to_numpy(dtype=np.float64), mask)


class DatasetSplits(NamedTuple):
    ngm: Dataset
    reward: Dataset
    eval: Dataset


def _draw(spec: BenchmarkSpec, rows: int, gen: np.random.Generator) -> Dataset:
    X = gen.uniform(spec.low, spec.high, size=(rows, spec.n_columns))
    zeros = X == 0.0
    while zeros.any():
        X[zeros] = gen.uniform(spec.low, spec.high, size=int(zeros.sum()))
        zeros = X == 0.0
    with np.errstate(all="ignore"):
        y = spec.ground_truth(X[:, :spec.variable_count])
    mask = np.arange(spec.n_columns) >= spec.variable_count
    return Dataset(X, np.asarray(y, dtype=np.float64), mask)


def make_datasets(
    spec: BenchmarkSpec,
    sizes: Tuple[int, int, int] = (20_000, 20, 20),
    rng: Optional[RngStream] = None,
) -> DatasetSplits:
    """Draw the NGM, reward and evaluation sets from three disjoint child streams."""
    if any(size <= 0 for size in sizes):
        raise ConfigError(f"dataset sizes must be positive, got {sizes}")
    rng = rng or RngStream(0, 0)

    splits = []
    for key, rows in enumerate(sizes):
        gen = rng.child(key).generator()
        for attempt in range(MAX_RESAMPLES):
            data = _draw(spec, rows, gen)
            if data.sigma_y >= SIGMA_FLOOR:
                break
            logger.warning("%s split %d: sigma_y %.3g below floor, resampling (attempt %d)", spec.id, key, data.sigma_y, attempt + 1)
        else:
            raise ConfigError(f"{spec.id}: could not draw a dataset with non-degenerate y")
        splits.append(data)
    return DatasetSplits(*splits)


def nmse(traversal: Traversal, lib: TokenLibrary, eval_set: Dataset) -> Optional[float]:
    """MSE / population variance of y; None when the expression is invalid on the set."""
    variance = float(np.var(eval_set.y))
    if variance == 0.0:
        raise ConfigError("evaluation set has zero variance")
    predictions, valid = evaluate(traversal, lib, eval_set.X)
    if not valid:
        return None
    with np.errstate(over="ignore"):
        value = float(np.mean((eval_set.y - predictions) ** 2) / variance)
    return value if np.isfinite(value) else None
