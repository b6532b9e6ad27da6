"""
Noise-resilient gating network.

A hard-concrete gate per input column feeds a two-layer batch-normalized MLP
regressor. The L0 penalty pushes irrelevant gates closed; the per-epoch
probabilities P(Z != 0) are averaged and binarized with a scaled Otsu
threshold into the variable filter used by the expression sampler.
"""
import logging
import math
from typing import TYPE_CHECKING, List, Literal, Sequence, Tuple

import numpy as np
import torch
from sklearn.preprocessing import StandardScaler
from torch import nn

from .errors import ConfigError, NgmTrainingError
from .numerics import DTYPE, AdamState, RngStream, adam_update, otsu_threshold
from .schemas import GateVector, NgmHyper

if TYPE_CHECKING:
    from .benchmarks import Dataset

logger = logging.getLogger(__name__)

_UNIFORM_LOW = float(np.nextafter(0.0, 1.0))


class HardConcreteGate(nn.Module):
    """One stretched, clipped Binary Concrete gate per input column."""

    def __init__(self, n_inputs: int, temperature: float = 2.0 / 3.0, stretch_lo: float = -0.1, stretch_hi: float = 1.1):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (stretch_lo < 0 < 1 < stretch_hi):
            raise ValueError("need stretch_lo < 0 < 1 < stretch_hi")
        self.log_alpha = nn.Parameter(torch.zeros(n_inputs, dtype=DTYPE))
        self.temperature = temperature
        self.stretch_lo = stretch_lo
        self.stretch_hi = stretch_hi


def sample_gates(gate: HardConcreteGate, uniforms: torch.Tensor) -> torch.Tensor:
    """Reparameterized gate sample; ``uniforms`` has shape (n,) or (rows, n)."""
    u = torch.as_tensor(uniforms, dtype=DTYPE)
    if not bool(((u > 0) & (u < 1)).all()):
        raise ValueError("gate uniforms must lie strictly inside (0, 1)")
    logits = (torch.log(u) - torch.log1p(-u) + gate.log_alpha) / gate.temperature
    stretched = torch.sigmoid(logits) * (gate.stretch_hi - gate.stretch_lo) + gate.stretch_lo
    return torch.clamp(stretched, 0.0, 1.0)


def prob_nonzero(gate: HardConcreteGate) -> torch.Tensor:
    shift = gate.temperature * math.log(-gate.stretch_lo / (gate.stretch_hi - gate.stretch_lo))
    return torch.sigmoid(gate.log_alpha - shift)


def deterministic_gates(gate: HardConcreteGate) -> torch.Tensor:
    stretched = torch.sigmoid(gate.log_alpha) * (gate.stretch_hi - gate.stretch_lo) + gate.stretch_lo
    return torch.clamp(stretched, 0.0, 1.0)


class NgmNetwork(nn.Module):
    """gate -> dense+BN+ReLU -> dense+BN+ReLU -> scalar output"""

    def __init__(self, n_inputs: int, hyper: NgmHyper = NgmHyper()):
        super().__init__()
        hidden = hyper.hidden_size
        self.gate = HardConcreteGate(n_inputs, hyper.temperature, hyper.stretch_lo, hyper.stretch_hi)
        self.dense1 = nn.Linear(n_inputs, hidden, dtype=DTYPE)
        self.batchnorm1 = nn.BatchNorm1d(hidden, dtype=DTYPE)
        self.dense2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.batchnorm2 = nn.BatchNorm1d(hidden, dtype=DTYPE)
        self.output = nn.Linear(hidden, 1, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator, hyper: NgmHyper = NgmHyper()) -> "NgmNetwork":
        with torch.no_grad():
            for layer in (self.dense1, self.dense2, self.output):
                nn.init.kaiming_normal_(layer.weight, nonlinearity="relu", generator=generator)
                layer.bias.zero_()
            self.gate.log_alpha.normal_(hyper.log_alpha_init_mean, hyper.log_alpha_init_std, generator=generator)
        return self

    def dense_weights(self) -> List[torch.Tensor]:
        return [self.dense1.weight, self.dense2.weight, self.output.weight]

    def forward(self, x: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.batchnorm1(self.dense1(x * gates)))
        h = torch.relu(self.batchnorm2(self.dense2(h)))
        return self.output(h).squeeze(-1)


def ngm_forward(net: NgmNetwork, gates: torch.Tensor, batch: torch.Tensor, mode: Literal["train", "eval"]) -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if batch.shape[-1] != net.dense1.in_features:
        raise ValueError(f"batch has {batch.shape[-1]} columns, network expects {net.dense1.in_features}")
    if mode == "train" and batch.shape[0] < 2:
        raise ValueError("batch normalization needs at least two rows in train mode")
    net.train(mode == "train")
    return net(batch, gates)


def ngm_loss(
    pred: torch.Tensor, targets: torch.Tensor, net: NgmNetwork, hyper: NgmHyper
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """MSE + lambda * sum P(Z != 0) + l2 * ||W||^2, with gradients for every parameter."""
    mse = torch.mean((pred - targets) ** 2)
    l0 = prob_nonzero(net.gate).sum()
    l2 = sum((w ** 2).sum() for w in net.dense_weights())
    loss = mse + hyper.lambda_l0 * l0 + hyper.l2_weight * l2

    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return loss.detach(), grads


def binarize_gates(probabilities: Sequence[float], otsu_scale: float) -> Tuple[np.ndarray, float, bool]:
    """Returns (binary, threshold_used, fallback_applied)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.size >= 2:
        result = otsu_threshold(probs)
        degenerate = result.degenerate
        threshold = result.threshold * otsu_scale
    else:
        degenerate = True
        threshold = float(probs[0]) * otsu_scale if probs.size else 0.0

    binary = np.zeros(probs.size, dtype=bool) if degenerate else probs > threshold
    fallback = not binary.any()
    if fallback:
        binary = np.ones(probs.size, dtype=bool)
    return binary, float(threshold), fallback


def train_ngm(data: "Dataset", hyper: NgmHyper, rng: RngStream) -> GateVector:
    """Fit the gated regressor on ``data`` and binarize its averaged gate probabilities."""
    gen = rng.child(1).generator()
    X = np.asarray(data.X, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.float64)
    m, n = X.shape

    order = gen.permutation(m)
    n_train = int(round(hyper.train_ratio * m))
    train_idx, val_idx = order[:n_train], order[n_train:]
    if train_idx.size < 2 or val_idx.size < 2:
        raise ConfigError(f"NGM needs at least two rows per split, got {train_idx.size} train / {val_idx.size} validation")

    x_scaler = StandardScaler().fit(X[train_idx])
    y_scaler = StandardScaler().fit(y[train_idx, None])
    X_train = torch.as_tensor(x_scaler.transform(X[train_idx]), dtype=DTYPE)
    y_train = torch.as_tensor(y_scaler.transform(y[train_idx, None])[:, 0], dtype=DTYPE)
    X_val = torch.as_tensor(x_scaler.transform(X[val_idx]), dtype=DTYPE)
    y_val = torch.as_tensor(y_scaler.transform(y[val_idx, None])[:, 0], dtype=DTYPE)

    net = NgmNetwork(n, hyper).reset_parameters(rng.child(0).torch_generator(), hyper)
    adam = AdamState(net.parameters(), hyper.learning_rate, hyper.beta1, hyper.beta2)

    epoch_probs: List[np.ndarray] = []
    for epoch in range(hyper.epochs):
        net.train()
        perm = gen.permutation(n_train)
        total, seen = 0.0, 0
        for start in range(0, n_train, hyper.batch_size):
            idx = torch.from_numpy(perm[start:start + hyper.batch_size])
            if idx.numel() < 2:
                continue
            shape = (idx.numel(), n) if hyper.gate_sampling == "per_row" else (n,)
            uniforms = torch.as_tensor(gen.uniform(_UNIFORM_LOW, 1.0, size=shape), dtype=DTYPE)
            gates = sample_gates(net.gate, uniforms)
            pred = ngm_forward(net, gates, X_train[idx], "train")
            loss, grads = ngm_loss(pred, y_train[idx], net, hyper)
            if not torch.isfinite(loss):
                raise NgmTrainingError(f"non-finite NGM loss at epoch {epoch + 1}")
            adam_update(adam.params, grads, adam)
            total += float(loss) * idx.numel()
            seen += idx.numel()

        with torch.no_grad():
            probs = prob_nonzero(net.gate).numpy().copy()
            val_pred = ngm_forward(net, deterministic_gates(net.gate), X_val, "eval")
            val_mse = float(torch.mean((val_pred - y_val) ** 2))
        epoch_probs.append(probs)
        logger.debug(
            "NGM epoch %d/%d: train loss %.5f, validation MSE %.5f, P(Z!=0) %s",
            epoch + 1, hyper.epochs, total / max(seen, 1), val_mse, np.array2string(probs, precision=3),
        )

    source = np.mean(epoch_probs, axis=0) if hyper.gate_source == "average" else epoch_probs[-1]
    binary, threshold, fallback = binarize_gates(source, hyper.otsu_scale)
    gates = GateVector(
        probabilities=[float(p) for p in source],
        binary=[bool(b) for b in binary],
        threshold_used=threshold,
        fallback_applied=fallback,
        hyper=hyper,
        seed=rng.master_seed,
        epoch_probabilities=[[float(p) for p in row] for row in epoch_probs],
    )
    if fallback:
        logger.info("NGM kept no variable above threshold %.4f; falling back to all %d variables", threshold, n)
    else:
        logger.info("NGM kept variables %s of %d (threshold %.4f)", [j + 1 for j in gates.kept], n, threshold)
    return gates
