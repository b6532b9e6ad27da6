"""Symbolic regression with a noise-resilient gating network and a risk-seeking expression policy."""
from .benchmarks import NGUYEN, Dataset, DatasetSplits, get_benchmark, make_datasets, nmse
from .config import dump_config, load_config
from .errors import (
    ConfigError,
    GatedSRError,
    GateEliminatedError,
    MalformedTraversalError,
    NgmTrainingError,
    NoLegalActionError,
    NonFiniteError,
)
from .experiments import aggregate, ngm_accuracy_suite, run_single, run_suite, summary_frame
from .gating import train_ngm
from .schemas import AggregateMetrics, GateVector, NgmHyper, RunConfig, RunReport, TrainerConfig
from .trainer import PolicyTrainer, train

__version__ = "0.1.0"
