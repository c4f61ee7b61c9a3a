"""Loss, optimizers and the deterministic training loop."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import Module
from .rng import SeededRng
from .tensor import GradTape, ShapeError, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class DivergenceError(TrainingError):
    """Loss became non-finite; carries the last finite log row."""

    def __init__(self, iteration: int, last_row: tuple | None):
        super().__init__(f"training diverged at iteration {iteration} (non-finite loss); "
                         f"last logged row: {last_row}", iteration)
        self.last_row = last_row


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int | None = None  # None = full batch
    seed: int = 42
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class IterationLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, iteration: int, rmse: float, mae: float) -> None:
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("iterations must be strictly increasing")
        self.rows.append((int(iteration), float(rmse), float(mae)))

    def __len__(self) -> int:
        return len(self.rows)

    def rmse_at(self, iteration: int) -> float:
        for it, rmse, _ in self.rows:
            if it == iteration:
                return rmse
        raise KeyError(f"iteration {iteration} not logged")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iteration,train_rmse,train_mae\n")
        for it, rmse, mae in self.rows:
            buf.write(f"{it},{rmse!r},{mae!r}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")

    @classmethod
    def from_csv(cls, text: str) -> "IterationLog":
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "iteration,train_rmse,train_mae":
            raise ValueError("not an iteration log CSV")
        log = cls()
        for line in lines[1:]:
            it, rmse, mae = line.split(",")
            log.append(int(it), float(rmse), float(mae))
        return log


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss of an empty batch")
    diff = pred - target
    return T.mean(diff * diff)


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, config: TrainConfig) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One SGD or Adam update; returns new arrays and a new state."""
    if params.keys() != grads.keys():
        raise ValueError("params and grads are not aligned")
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at iteration {step}", step)
    lr = config.learning_rate
    if config.optimizer == "sgd":
        new = {k: params[k] - lr * grads[k] for k in params}
        return new, OptimizerState(step)

    bc1 = 1.0 - ADAM_BETA1 ** step
    bc2 = 1.0 - ADAM_BETA2 ** step
    m_new, v_new, out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = ADAM_BETA1 * state.m.get(k, 0.0) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(k, 0.0) + (1.0 - ADAM_BETA2) * g * g
        out[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        m_new[k], v_new[k] = m, v
    return out, OptimizerState(step, m_new, v_new)


# ---------------------------------------------------------------------------
# training loop

def loss_and_grads(model: Module, X: Tensor, y: Tensor) -> tuple[float, dict[str, np.ndarray]]:
    tape = GradTape()
    live, leaves = model.attach(tape)
    loss = mse_loss(live(X), y)
    names = list(leaves)
    grads = tape.gradient(loss, [leaves[n] for n in names])
    return loss.item(), dict(zip(names, grads))


def _fit_stats(model: Module, X: Tensor, y: Tensor) -> tuple[float, float]:
    with np.errstate(over="ignore", invalid="ignore"):
        err = model(X).numpy() - y.numpy()
        return math.sqrt(float(np.mean(err * err))), float(np.mean(np.abs(err)))


def train(model: Module, dataset, config: TrainConfig) -> tuple[Module, IterationLog]:
    """Gradient training on ``dataset.X``/``dataset.y`` (scaled space).

    Full batch by default, so one iteration is one epoch. Every
    ``checkpoint_every`` iterations the full training set is re-scored with
    the updated parameters and logged.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.X.shape[-1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, dataset has {dataset.X.shape[-1]}")
    log = IterationLog()
    X, y = dataset.X, dataset.y
    params = {k: p.data for k, p in model.parameters().items()}
    state = OptimizerState()
    batch = n if config.batch_size is None else min(config.batch_size, n)
    rng = SeededRng(config.seed)
    iteration = 0
    for _ in range(config.epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            xb, yb = (X, y) if batch == n else (Tensor(X.data[idx]), Tensor(y.data[idx]))
            iteration += 1
            loss, grads = loss_and_grads(model, xb, yb)
            if not math.isfinite(loss):
                raise DivergenceError(iteration, log.rows[-1] if log.rows else None)
            params, state = optimizer_step(params, grads, state, config)
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise DivergenceError(iteration, log.rows[-1] if log.rows else None)
            model = model.with_parameters(params)
            if iteration % config.checkpoint_every == 0:
                rmse, mae = _fit_stats(model, X, y)
                if not math.isfinite(rmse):
                    raise DivergenceError(iteration, log.rows[-1] if log.rows else None)
                log.append(iteration, rmse, mae)
    return model, log
