"""
Risk-seeking policy training loop.

Each iteration samples a batch of traversals under the gated action mask,
scores them by 1/(1+NRMSE) on the reward set, keeps the top-epsilon fraction
and takes clipped-surrogate (or plain policy-gradient) steps on it with a
mixed entropy bonus: alpha on the path entropy of whole sequences and beta
on the gamma-decayed per-step entropy. The loop stops on numeric recovery
or when the expression budget is spent.
"""
import logging
import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .benchmarks import Dataset, nmse
from .constraints import ActionMasker
from .errors import ConfigError, GatedSRError, NonFiniteError
from .expressions import TokenLibrary, Traversal, canonical_key, evaluate, render_infix
from .numerics import POLICY_INIT_STREAM, AdamState, RngStream, adam_update
from .policy import PolicyNetwork, TrajectoryRecord, rescore, sample_batch
from .schemas import GateVector, IterationRecord, MaskConfig, RunReport, Toggles, TrainerConfig
from .utils import ThroughputMeter

logger = logging.getLogger(__name__)


# ===================== Rewards =====================

@dataclass(frozen=True)
class RewardEval:
    nrmse: Optional[float]
    reward: float

    @property
    def valid(self) -> bool:
        return self.nrmse is not None


def nrmse(y: np.ndarray, predictions: np.ndarray) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.sqrt(np.mean((y - predictions) ** 2)) / np.std(y))


def reward(traversal: Traversal, lib: TokenLibrary, reward_set: Dataset) -> RewardEval:
    if not reward_set.sigma_y > 0.0:
        raise ConfigError("reward set has zero standard deviation")
    predictions, valid = evaluate(traversal, lib, reward_set.X)
    if not valid:
        return RewardEval(None, 0.0)
    value = nrmse(reward_set.y, predictions)
    if not math.isfinite(value):
        return RewardEval(None, 0.0)
    return RewardEval(value, 1.0 / (1.0 + value))


class RewardCache:
    """Reward evaluations keyed by canonical traversal key. Inserts are serialized."""

    def __init__(self):
        self._entries: Dict[bytes, RewardEval] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: bytes) -> bool:
        return key in self._entries

    def get_or_compute(self, key: bytes, compute: Callable[[], RewardEval]) -> RewardEval:
        cached = self._entries.get(key)
        if cached is not None:
            self.hits += 1
            return cached
        value = compute()
        with self._lock:
            self.misses += 1
            return self._entries.setdefault(key, value)


# ===================== Risk filtering =====================

@dataclass
class BatchStats:
    baseline: float
    kept_indices: np.ndarray
    advantages: np.ndarray
    mean_reward: float
    max_reward: float
    entropy: float = 0.0
    path_entropy: float = 0.0


def quantile_filter(rewards: Sequence[float], epsilon: float) -> BatchStats:
    """Keep the ceil(eps*N) best rewards (ties to the lower index); baseline is the lower (1-eps)-quantile."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("quantile_filter needs at least one reward")
    n_keep = max(1, math.ceil(round(epsilon * r.size, 9)))
    baseline = float(np.quantile(r, 1.0 - epsilon, method="lower"))
    kept = np.argsort(-r, kind="stable")[:n_keep]
    return BatchStats(
        baseline=baseline,
        kept_indices=kept,
        advantages=r[kept] - baseline,
        mean_reward=float(r.mean()),
        max_reward=float(r.max()),
    )


# ===================== Losses =====================

def hierarchical_entropy(entropies: torch.Tensor, step_mask: torch.Tensor, gamma: float) -> torch.Tensor:
    """Batch mean of sum_t gamma^(t-1) * H_t."""
    weights = gamma ** torch.arange(entropies.shape[1], dtype=entropies.dtype)
    return (entropies * weights * step_mask).sum(dim=1).mean()


def path_entropy(log_probs: torch.Tensor, step_mask: torch.Tensor) -> torch.Tensor:
    """Monte Carlo path entropy: batch mean of -log pi(tau)."""
    return -(log_probs * step_mask).sum(dim=1).mean()


@dataclass
class PolicyLoss:
    loss: float
    grads: List[torch.Tensor]
    surrogate: float
    entropy: float
    path_entropy: float
    skipped: int


def ppo_loss(
    net: PolicyNetwork,
    batch: Sequence[TrajectoryRecord],
    old_log_probs: torch.Tensor,
    advantages: torch.Tensor,
    cfg: TrainerConfig,
    toggles: Optional[Toggles] = None,
) -> PolicyLoss:
    """
    L = -mean_t[min(r*A, clip(r)*A)] - alpha*H_tau - beta*H over the kept set.

    With ``toggles.use_ppo`` off the surrogate is the plain -mean_t[A * log pi].
    Trajectories whose ratios are non-finite are skipped and counted.
    """
    toggles = toggles or Toggles()
    scored = rescore(net, batch)
    step_mask = scored.step_mask
    adv = torch.as_tensor(advantages, dtype=scored.log_probs.dtype)[:, None].expand_as(scored.log_probs)

    if toggles.use_ppo:
        log_ratio = scored.log_probs - old_log_probs
        with torch.no_grad():
            ok = torch.isfinite(torch.exp(log_ratio)) | ~step_mask
        finite = ok.all(dim=1)
        ratio = torch.exp(torch.where(finite[:, None], log_ratio, torch.zeros_like(log_ratio)))
        clipped = torch.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
        per_step = torch.minimum(ratio * adv, clipped * adv)
    else:
        finite = torch.ones(len(batch), dtype=torch.bool)
        per_step = scored.log_probs * adv

    skipped = int((~finite).sum())
    if skipped:
        logger.warning("skipping %d trajectories with non-finite importance ratios", skipped)
    used = step_mask & finite[:, None]
    zero = scored.log_probs.sum() * 0.0
    surrogate = -per_step[used].mean() if bool(used.any()) else zero

    rows = finite.nonzero().squeeze(1)
    if rows.numel():
        entropy = hierarchical_entropy(scored.entropies[rows], step_mask[rows], cfg.gamma)
        path_h = path_entropy(scored.log_probs[rows], step_mask[rows])
    else:
        entropy = path_h = zero

    loss = surrogate - cfg.beta * entropy
    if toggles.use_path_entropy:
        loss = loss - cfg.alpha * path_h

    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return PolicyLoss(
        loss=float(loss.detach()),
        grads=grads,
        surrogate=float(surrogate.detach()),
        entropy=float(entropy.detach()),
        path_entropy=float(path_h.detach()),
        skipped=skipped,
    )


# ===================== Training loop =====================

class PolicyTrainer:
    def __init__(
        self,
        cfg: TrainerConfig,
        reward_set: Dataset,
        eval_set: Dataset,
        gates: Optional[GateVector],
        seed: int,
        mask_cfg: Optional[MaskConfig] = None,
        toggles: Optional[Toggles] = None,
    ):
        self.cfg = cfg
        self.toggles = toggles or Toggles()
        self.reward_set = reward_set
        self.eval_set = eval_set
        self.seed = seed
        self.library = TokenLibrary.standard(reward_set.X.shape[1])
        self.gates = gates if gates is not None else GateVector.all_open(self.library.n_variables)
        self.masker = ActionMasker(self.library, mask_cfg or MaskConfig(), self.gates)
        self.policy = PolicyNetwork(len(self.library), cfg.hidden_size).reset_parameters(
            RngStream(seed, POLICY_INIT_STREAM).torch_generator()
        )
        self.adam = AdamState(self.policy.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)
        self.cache = RewardCache()

        self.iteration = 0
        self.een = 0
        self.best: Optional[Traversal] = None
        self.best_reward = 0.0
        self.recovered = False
        self.skipped_samples = 0
        self.rejected_updates = 0
        self._entropy_trace: List[float] = []
        self._path_entropy_trace: List[float] = []
        self._sampled_entropy_trace: List[float] = []

    @property
    def uen(self) -> int:
        return len(self.cache)

    def _score(self, batch: Sequence[TrajectoryRecord]) -> List[RewardEval]:
        evals = []
        for trajectory in batch:
            key = canonical_key(trajectory.traversal)
            result = self.cache.get_or_compute(
                key, lambda tr=trajectory: reward(tr.traversal, self.library, self.reward_set)
            )
            trajectory.reward = result.reward
            evals.append(result)
        return evals

    def _find_recovery(self, batch: Sequence[TrajectoryRecord], evals: Sequence[RewardEval]) -> Optional[int]:
        for index, result in enumerate(evals):
            if result.valid and result.nrmse <= self.cfg.recovery_tol:
                predictions, valid = evaluate(batch[index].traversal, self.library, self.eval_set.X)
                if valid and nrmse(self.eval_set.y, predictions) <= self.cfg.recovery_tol:
                    return index
        return None

    def _update(self, batch: Sequence[TrajectoryRecord], stats: BatchStats) -> float:
        kept = [batch[i] for i in stats.kept_indices]
        advantages = torch.as_tensor(stats.advantages)
        with torch.no_grad():
            old_log_probs = rescore(self.policy, kept).log_probs

        passes = self.cfg.ppo_epochs if self.toggles.use_ppo else 1
        last_loss = 0.0
        for index in range(passes):
            terms = ppo_loss(self.policy, kept, old_log_probs, advantages, self.cfg, self.toggles)
            self.skipped_samples += terms.skipped
            if index == 0:
                stats.entropy = terms.entropy
                stats.path_entropy = terms.path_entropy
            last_loss = terms.loss
            try:
                adam_update(self.adam.params, terms.grads, self.adam)
            except NonFiniteError as exc:
                self.rejected_updates += 1
                logger.warning("iteration %d: %s", self.iteration, exc.detail)
                break
        return last_loss

    def run(
        self,
        log_sink: Optional[Callable[[IterationRecord], None]] = None,
        batch_observer: Optional[Callable[[int, List[TrajectoryRecord]], None]] = None,
        forced: Optional[Sequence[Optional[Sequence[int]]]] = None,
    ) -> RunReport:
        """
        Train until recovery or budget exhaustion.

        ``forced`` replays fixed token sequences as the first batch.
        Runtime failures end the run with ``status="aborted"``; configuration
        errors propagate.
        """
        cfg = self.cfg
        started = time.perf_counter()
        meter = ThroughputMeter(buffer_len=cfg.log_every)
        status, error = "completed", None

        try:
            while self.een < cfg.max_expressions:
                base = RngStream.for_iteration(self.seed, self.iteration)
                streams = [base.child(j) for j in range(cfg.batch_size)]
                batch = sample_batch(self.policy, self.masker, streams, forced if self.iteration == 0 else None)
                self.een += len(batch)

                evals = self._score(batch)
                if batch_observer is not None:
                    batch_observer(self.iteration, batch)
                rewards = np.array([e.reward for e in evals])

                top = int(np.argmax(rewards))
                if rewards[top] > self.best_reward or self.best is None:
                    self.best, self.best_reward = batch[top].traversal, float(rewards[top])

                hit = self._find_recovery(batch, evals)
                if hit is not None:
                    self.best, self.best_reward = batch[hit].traversal, float(rewards[hit])
                    self.recovered = True
                    self.iteration += 1
                    logger.info("recovered %s after %d expressions", render_infix(self.best, self.library), self.een)
                    break

                stats = quantile_filter(rewards, cfg.risk_epsilon)
                loss = self._update(batch, stats)
                self._entropy_trace.append(stats.entropy)
                self._path_entropy_trace.append(stats.path_entropy)
                # -mean log pi(tau) over the whole sampled batch
                sampled_h = -float(np.mean([t.sequence_log_prob for t in batch]))
                self._sampled_entropy_trace.append(sampled_h)

                record = IterationRecord(
                    iteration=self.iteration,
                    een=self.een,
                    uen=self.uen,
                    baseline=stats.baseline,
                    best_reward=self.best_reward,
                    entropy=stats.entropy,
                    path_entropy=stats.path_entropy,
                    loss=loss,
                    sampled_path_entropy=sampled_h,
                )
                if log_sink is not None:
                    log_sink(record)
                rate = meter.tick(len(batch))
                if (self.iteration + 1) % cfg.log_every == 0:
                    logger.info(
                        "iter %d: EEN %d, UEN %d, R_eta %.4f, best %.6f, H %.3f, H_tau %.3f (%.0f expr/s)",
                        self.iteration + 1, self.een, self.uen, stats.baseline, self.best_reward,
                        stats.entropy, stats.path_entropy, rate,
                    )
                self.iteration += 1
        except ConfigError:
            raise
        except GatedSRError as exc:
            status, error = "aborted", exc.detail
            logger.error("run aborted at iteration %d: %s", self.iteration, exc.detail)

        return self._report(status, error, time.perf_counter() - started)

    def _report(self, status: str, error: Optional[str], wall_time: float) -> RunReport:
        eval_nmse = nmse(self.best, self.library, self.eval_set) if self.best is not None else None
        return RunReport(
            seed=self.seed,
            status=status,
            error=error,
            recovered=self.recovered,
            best_traversal=self.library.format(self.best) if self.best is not None else None,
            best_infix=render_infix(self.best, self.library) if self.best is not None else None,
            best_reward=self.best_reward,
            een=self.een,
            uen=self.uen,
            eval_nmse=eval_nmse,
            eval_invalid=self.best is not None and eval_nmse is None,
            iterations=self.iteration,
            wall_time=wall_time,
            gate_binary=list(self.gates.binary),
            gate_fallback=self.gates.fallback_applied,
            mean_entropy=float(np.mean(self._entropy_trace)) if self._entropy_trace else 0.0,
            mean_path_entropy=float(np.mean(self._path_entropy_trace)) if self._path_entropy_trace else 0.0,
            mean_sampled_path_entropy=(
                float(np.mean(self._sampled_entropy_trace)) if self._sampled_entropy_trace else 0.0
            ),
            skipped_samples=self.skipped_samples,
            rejected_updates=self.rejected_updates,
        )


def train(
    cfg: TrainerConfig,
    reward_set: Dataset,
    eval_set: Dataset,
    gates: Optional[GateVector],
    seed: int,
    mask_cfg: Optional[MaskConfig] = None,
    toggles: Optional[Toggles] = None,
    **hooks,
) -> RunReport:
    return PolicyTrainer(cfg, reward_set, eval_set, gates, seed, mask_cfg, toggles).run(**hooks)
