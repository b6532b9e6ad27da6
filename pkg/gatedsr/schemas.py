import hashlib
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ===================== Configuration =====================

class MaskConfig(_Section):
    min_length: int = Field(default=4, ge=1)
    max_length: int = Field(default=32, ge=1)
    forbid_inverse_child: bool = True
    forbid_trig_descendant: bool = True
    require_variable: bool = True

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.min_length > self.max_length:
            raise ValueError(f"min_length ({self.min_length}) exceeds max_length ({self.max_length})")
        return self


class NgmHyper(_Section):
    lambda_l0: float = Field(default=0.25, gt=0)
    l2_weight: float = Field(default=1e-5, gt=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    epochs: int = Field(default=20, gt=0)
    batch_size: int = Field(default=256, gt=1)
    train_ratio: float = Field(default=0.8, gt=0, lt=1)
    otsu_scale: float = Field(default=1.05, gt=0)
    hidden_size: int = Field(default=128, gt=0)
    beta1: float = Field(default=0.99, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    temperature: float = Field(default=2.0 / 3.0, gt=0)
    stretch_lo: float = -0.1
    stretch_hi: float = 1.1
    log_alpha_init_mean: float = 0.0
    log_alpha_init_std: float = Field(default=0.01, ge=0)
    gate_sampling: Literal["per_row", "per_batch"] = "per_row"
    gate_source: Literal["average", "final_epoch"] = "average"

    @model_validator(mode="after")
    def _check_stretch(self):
        if not (self.stretch_lo < 0 < 1 < self.stretch_hi):
            raise ValueError(f"need stretch_lo < 0 < 1 < stretch_hi, got ({self.stretch_lo}, {self.stretch_hi})")
        return self


class TrainerConfig(_Section):
    batch_size: int = Field(default=1000, gt=0)
    risk_epsilon: float = Field(default=0.05, gt=0, lt=1)
    clip: float = Field(default=0.2, gt=0)
    ppo_epochs: int = Field(default=4, gt=0)
    learning_rate: float = Field(default=5e-5, gt=0)
    alpha: float = Field(default=0.05, ge=0)
    beta: float = Field(default=0.02, ge=0)
    gamma: float = Field(default=0.7, gt=0, lt=1)
    max_expressions: int = Field(default=2_000_000, gt=0)
    recovery_tol: float = Field(default=1e-10, gt=0)
    hidden_size: int = Field(default=32, gt=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    log_every: int = Field(default=10, gt=0)


class Toggles(_Section):
    use_ngm: bool = True
    use_path_entropy: bool = True
    use_ppo: bool = True

    @property
    def variant(self) -> str:
        """Directory tag of an ablation; empty for the full method."""
        off = [
            name for name, on in (
                ("no-ngm", self.use_ngm),
                ("no-path-entropy", self.use_path_entropy),
                ("no-ppo", self.use_ppo),
            ) if not on
        ]
        return "+".join(off)

    @property
    def label(self) -> str:
        return self.variant or "full"


class DataConfig(_Section):
    ngm_rows: int = Field(default=20_000, gt=0)
    reward_rows: int = Field(default=20, gt=0)
    eval_rows: int = Field(default=20, gt=0)

    @property
    def sizes(self):
        return (self.ngm_rows, self.reward_rows, self.eval_rows)


class BenchConfig(_Section):
    benchmarks: List[str] = Field(default_factory=lambda: [f"Nguyen-{i}" for i in range(1, 13)])
    seeds: List[int] = Field(default_factory=lambda: list(range(10)))
    noise_counts: List[int] = Field(default_factory=lambda: [3, 5, 10, 20])
    otsu_scales: List[float] = Field(default_factory=lambda: [1.05])
    lambda_l0_values: List[float] = Field(default_factory=lambda: [0.25])
    jobs: int = Field(default=1, gt=0)


# settings that shape datasets, gates and training; output_dir and bench do not
_RUN_FIELDS = {"benchmark", "noise_count", "seed", "toggles", "data", "ngm", "trainer", "mask"}


class RunConfig(_Section):
    benchmark: str = "Nguyen-1"
    noise_count: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0)
    output_dir: str = "runs"
    toggles: Toggles = Field(default_factory=Toggles)
    data: DataConfig = Field(default_factory=DataConfig)
    ngm: NgmHyper = Field(default_factory=NgmHyper)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    def fingerprint(self) -> str:
        """Digest of every setting that changes a run's outcome."""
        payload = self.model_dump_json(include=_RUN_FIELDS)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ===================== Artifacts =====================

class GateVector(BaseModel):
    probabilities: List[float]
    binary: List[bool]
    threshold_used: float
    fallback_applied: bool
    hyper: Optional[NgmHyper] = None
    seed: Optional[int] = None
    epoch_probabilities: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _check_binary(self):
        if len(self.binary) != len(self.probabilities):
            raise ValueError("binary and probabilities differ in length")
        if not any(self.binary):
            raise ValueError("a gate vector must keep at least one variable")
        if self.fallback_applied:
            if not all(self.binary):
                raise ValueError("fallback gates must be all-ones")
        elif any(b != (p > self.threshold_used) for b, p in zip(self.binary, self.probabilities)):
            raise ValueError("binary gates disagree with threshold_used")
        return self

    @classmethod
    def all_open(cls, n_variables: int) -> "GateVector":
        return cls(
            probabilities=[1.0] * n_variables,
            binary=[True] * n_variables,
            threshold_used=0.0,
            fallback_applied=False,
        )

    @property
    def kept(self) -> List[int]:
        return [j for j, keep in enumerate(self.binary) if keep]


class IterationRecord(BaseModel):
    iteration: int
    een: int
    uen: int
    baseline: float
    best_reward: float
    entropy: float
    path_entropy: float
    loss: float
    sampled_path_entropy: float = 0.0


class RunReport(BaseModel):
    benchmark: Optional[str] = None
    noise_count: int = 0
    seed: int
    status: Literal["completed", "aborted"] = "completed"
    error: Optional[str] = None
    recovered: bool = False
    best_traversal: Optional[str] = None
    best_infix: Optional[str] = None
    best_reward: float = 0.0
    een: int = 0
    uen: int = 0
    eval_nmse: Optional[float] = None
    eval_invalid: bool = False
    iterations: int = 0
    wall_time: float = 0.0
    toggles: Toggles = Field(default_factory=Toggles)
    config_fingerprint: Optional[str] = None
    gate_binary: Optional[List[bool]] = None
    gate_fallback: bool = False
    mean_entropy: float = 0.0
    mean_path_entropy: float = 0.0
    mean_sampled_path_entropy: float = 0.0
    skipped_samples: int = 0
    rejected_updates: int = 0

    @model_validator(mode="after")
    def _check_counts(self):
        if self.uen > self.een:
            raise ValueError(f"uen ({self.uen}) exceeds een ({self.een})")
        return self


class AggregateMetrics(BaseModel):
    benchmark: str
    noise_count: int
    variant: str = "full"
    runs: int
    failures: int
    RR: float
    mean_EEN: float
    median_EEN: float
    mean_NMSE: Optional[float]
    invalid_nmse: int
    UEN_total: int
    EEN_total: int
    EER: float
    seeds: str
