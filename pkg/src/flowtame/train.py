"""Maximum-likelihood training of a flow by average NLL minimization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import (
    ConfigError,
    EmptyInputError,
    NonFiniteGradError,
    NonFiniteLossError,
)
from .flow import FlowModel

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Learning rate used at image scale in the original setting; kept as a preset.
IMAGE_SCALE_LEARNING_RATE = 5e-5
DESK_SCALE_LEARNING_RATE = 5e-4

DIVERGENCE_CEILING = 1e6


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 128
    learning_rate: float = DESK_SCALE_LEARNING_RATE
    seed: int = 0
    eval_every: int = 100
    optimizer: str = "adam"

    def __post_init__(self):
        for name in ("iterations", "batch_size", "learning_rate", "eval_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


class OptimizerState:
    """SGD or Adam state over a fixed parameter list."""

    def __init__(self, kind: str, learning_rate: float, params: list[Parameter]):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.kind = kind
        self.learning_rate = learning_rate
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]


def step(optimizer: OptimizerState, params: list[Parameter],
         grads: list[np.ndarray]) -> None:
    """Apply one optimizer update in place.

    Adam uses the standard bias-corrected form with betas (0.9, 0.999).
    Parameter updates assign fresh arrays; node values are never mutated
    in place, so graphs built before the step stay valid.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError("gradient contains NaN or Inf")
    optimizer.step_count += 1
    t = optimizer.step_count
    lr = optimizer.learning_rate
    if optimizer.kind == "sgd":
        for p, g in zip(params, grads):
            p.node.value = p.node.value - lr * g
        return
    b1, b2 = ADAM_BETAS
    for i, (p, g) in enumerate(zip(params, grads)):
        optimizer.m[i] = b1 * optimizer.m[i] + (1.0 - b1) * g
        optimizer.v[i] = b2 * optimizer.v[i] + (1.0 - b2) * g * g
        m_hat = optimizer.m[i] / (1.0 - b1 ** t)
        v_hat = optimizer.v[i] / (1.0 - b2 ** t)
        p.node.value = p.node.value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def nll(model: FlowModel, batch) -> Node:
    """Average negative log-likelihood of the batch, as a scalar node."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise EmptyInputError("nll of empty batch")
    return ad.mean(ad.neg(model.log_prob(batch)))


@dataclass
class TrainResult:
    model: FlowModel
    curve: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_nll(self) -> float:
        return self.curve[-1][1] if self.curve else float("nan")


def train(model: FlowModel, dataset, config: TrainConfig) -> TrainResult:
    """Fit the model to the dataset; returns it with the training curve.

    Batches are drawn with replacement from a generator seeded by
    ``config.seed``, so a fixed seed reproduces the run bitwise. Divergence
    (non-finite loss or loss above 1e6) aborts with the last good parameter
    values attached to the raised error.
    """
    points = np.asarray(getattr(dataset, "points", dataset), dtype=np.float64)
    if points.size == 0:
        raise EmptyInputError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = model.params
    optimizer = OptimizerState(config.optimizer, config.learning_rate, params)
    curve: list[tuple[int, float]] = []
    last_good = [p.value.copy() for p in params]

    for iteration in range(1, config.iterations + 1):
        idx = rng.integers(0, points.shape[0], size=config.batch_size)
        loss = nll(model, points[idx])
        loss_value = float(loss.value)
        if not np.isfinite(loss_value) or loss_value > DIVERGENCE_CEILING:
            rescue = model.clone()
            for p, v in zip(rescue.params, last_good):
                p.node.value = v.copy()
            raise NonFiniteLossError(
                f"training diverged at iteration {iteration} (nll={loss_value})",
                last_good=rescue, iteration=iteration)
        curve.append((iteration, loss_value))
        last_good = [p.value.copy() for p in params]
        ad.zero_grad(params)
        ad.backward(loss)
        step(optimizer, params, [p.grad for p in params])

    return TrainResult(model=model, curve=curve)
