"""
Shared numeric kernels: seeded RNG streams, Adam, masked log-softmax, Otsu
thresholding and a central-difference gradient checker.

Everything runs in double precision. Networks live in torch (``DTYPE``);
data-side kernels use numpy.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np
import torch

from .errors import NoLegalActionError, NonFiniteError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# Fixed stream-id mapping: every source of randomness derives from one seed.
DATA_STREAM = 0
NGM_STREAM = 1
POLICY_INIT_STREAM = 2
SAMPLING_STREAM_BASE = 3


# ===================== RNG streams =====================

@dataclass(frozen=True)
class RngStream:
    """A reproducible, splittable random stream keyed by (master_seed, stream_id, path)."""

    master_seed: int
    stream_id: int
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.master_seed < 0 or self.master_seed >= 2 ** 64:
            raise ValueError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")
        if self.stream_id < 0:
            raise ValueError(f"stream_id must be non-negative, got {self.stream_id}")

    @classmethod
    def for_iteration(cls, master_seed: int, iteration: int) -> "RngStream":
        return cls(master_seed, SAMPLING_STREAM_BASE + iteration)

    def child(self, key: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_id, self.path + (int(key),))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.stream_id,) + self.path)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def torch_generator(self) -> torch.Generator:
        seed = int(self.seed_sequence().generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
        return torch.Generator().manual_seed(seed)


# ===================== Adam =====================

class AdamState:
    """Owns a ``torch.optim.Adam`` over a fixed parameter list."""

    def __init__(
        self,
        params: Iterable[torch.nn.Parameter],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.params: List[torch.nn.Parameter] = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.optimizer = torch.optim.Adam(
            self.params,
            lr=learning_rate,
            betas=(beta1, beta2),
            eps=epsilon,
            foreach=False,
        )

    def first_moment(self, index: int) -> torch.Tensor:
        return self._moment(index, "exp_avg")

    def second_moment(self, index: int) -> torch.Tensor:
        return self._moment(index, "exp_avg_sq")

    def _moment(self, index: int, key: str) -> torch.Tensor:
        state = self.optimizer.state.get(self.params[index], {})
        if key not in state:
            return torch.zeros_like(self.params[index])
        return state[key]


def adam_update(
    params: Sequence[torch.nn.Parameter],
    grads: Sequence[torch.Tensor],
    state: AdamState,
) -> Sequence[torch.nn.Parameter]:
    """Apply one bias-corrected Adam step in place and return the parameters."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for index, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise ValueError(f"gradient {index} has shape {tuple(grad.shape)}, expected {tuple(param.shape)}")
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {index}; update rejected")

    for param, grad in zip(params, grads):
        param.grad = grad.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step_count += 1
    return params


# ===================== Softmax =====================

def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Log-softmax over the last axis; ``-inf`` entries get probability exactly 0."""
    if not torch.isfinite(logits).any(dim=-1).all():
        raise NoLegalActionError("no legal action")
    return torch.log_softmax(logits, dim=-1)


# ===================== Otsu =====================

class OtsuResult(NamedTuple):
    threshold: float
    degenerate: bool


def otsu_threshold(values: Sequence[float]) -> OtsuResult:
    """
    Exact Otsu split over sorted values.

    Every split between consecutive distinct sorted values is scored by the
    between-class variance w0*w1*(mu0 - mu1)^2. The threshold is the midpoint
    of the two values around the best split; ties keep the lowest split.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size < 2:
        raise ValueError("otsu_threshold needs at least two values")
    if v[0] == v[-1]:
        return OtsuResult(float(v[0]), True)

    n = v.size
    prefix = np.cumsum(v)
    total = prefix[-1]
    # split k puts v[:k] in the lower class
    ks = np.arange(1, n)
    distinct = v[1:] != v[:-1]
    w0 = ks / n
    w1 = 1.0 - w0
    mu0 = prefix[:-1] / ks
    mu1 = (total - prefix[:-1]) / (n - ks)
    between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.where(distinct, between, -np.inf)

    best = int(np.argmax(between))
    return OtsuResult(float(0.5 * (v[best] + v[best + 1])), False)


# ===================== Gradient checking =====================

def finite_diff_check(
    function: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    params: np.ndarray,
    step: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """
    Max elementwise relative error between central differences and an analytic gradient.

    The relative error is |a - n| / max(|a|, |n|, floor); ``floor`` keeps
    near-zero components from dominating through round-off.
    """
    x = np.array(params, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(x.shape)
    numeric = np.empty_like(x)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + step
        upper = function(x)
        x.flat[i] = original - step
        lower = function(x)
        x.flat[i] = original
        numeric.flat[i] = (upper - lower) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    errors = np.abs(analytic - numeric) / denom
    worst = float(errors.max()) if errors.size else 0.0
    if not math.isfinite(worst):
        logger.warning("finite_diff_check produced a non-finite error")
    return worst
