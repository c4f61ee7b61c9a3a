"""Hybrid LSTM -> Conv1D -> MaxPool -> Transformer -> Dense forecaster and baselines.

Parameter count of the hybrid model for ``f`` input features with the
default widths (hidden 64, 32 filters, kernel 2, model dim 32, FFN 64)::

    lstm        4 * (64 f + 64*64 + 64)
    conv        32 * 64 * 2 + 32
    attention   4 * 32 * 32
    layer norms 2 * (32 + 32)
    ffn         (32*64 + 64) + (64*32 + 32)
    head        32 + 1

which is ``256 f + 29217``; 31521 for the nine canonical features.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .layers import (Conv1dLayer, DenseLayer, LstmLayer, MaxPool1d, Module, TransformerBlock,
                     conv1d_forward, lstm_forward, maxpool_forward, transformer_block_forward)
from .rng import SeededRng
from .tensor import ShapeError, Tensor

CHECKPOINT_FORMAT = "gasforecast-checkpoint"
CHECKPOINT_VERSION = 1
LINREG_RIDGE = 1e-10
LINREG_COND_LIMIT = 1e10


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class CheckpointError(ValueError):
    pass


def hybrid_parameter_count(f: int, hidden: int = 64, filters: int = 32, kernel_size: int = 2,
                           ffn_dim: int = 64) -> int:
    lstm = 4 * (f * hidden + hidden * hidden + hidden)
    conv = filters * hidden * kernel_size + filters
    attention = 4 * filters * filters
    norms = 2 * (filters + filters)
    ffn = (filters * ffn_dim + ffn_dim) + (ffn_dim * filters + filters)
    head = filters + 1
    return lstm + conv + attention + norms + ffn + head


def _flatten_batch(batch: Tensor, f: int) -> Tensor:
    if batch.ndim != 3 or batch.shape[2] != f:
        raise ShapeError(f"expected batch of shape (n, steps, {f}), got {batch.shape}")
    return batch.reshape(batch.shape[0], batch.shape[1] * f)


@dataclass(frozen=True)
class HybridModel(Module):
    lstm: LstmLayer
    conv: Conv1dLayer
    pool: MaxPool1d
    transformer: TransformerBlock
    head: DenseLayer

    kind = "hybrid"

    @property
    def n_features(self) -> int:
        return self.lstm.input_dim

    def config(self) -> dict:
        return {
            "hidden": self.lstm.hidden_dim,
            "filters": self.conv.filters,
            "kernel_size": self.conv.kernel_size,
            "pool_size": self.pool.pool_size,
            "heads": self.transformer.attention.heads,
            "ffn_dim": self.transformer.ffn_in.weights.shape[1],
        }

    @classmethod
    def init(cls, rng: SeededRng, f: int, hidden: int = 64, filters: int = 32, kernel_size: int = 2,
             pool_size: int = 1, heads: int = 4, ffn_dim: int = 64) -> "HybridModel":
        return cls(
            lstm=LstmLayer.init(rng, f, hidden),
            conv=Conv1dLayer.init(rng, hidden, filters, kernel_size),
            pool=MaxPool1d(pool_size),
            transformer=TransformerBlock.init(rng, filters, heads, ffn_dim),
            head=DenseLayer.init(rng, filters, 1, "linear"),
        )

    def __call__(self, batch: Tensor) -> Tensor:
        return hybrid_forward(self, batch)


def hybrid_forward(model: HybridModel, batch: Tensor) -> Tensor:
    """Per-sample scalar prediction for a ``(n, steps, f)`` batch."""
    batch = T.as_tensor(batch)
    if batch.ndim != 3 or batch.shape[2] != model.n_features:
        raise ShapeError(f"hybrid model expects (n, steps, {model.n_features}) input, got {batch.shape}")
    h = lstm_forward(model.lstm, batch)
    h = conv1d_forward(model.conv, h)
    h = maxpool_forward(model.pool, h)
    h = transformer_block_forward(model.transformer, h)
    flat = h.reshape(h.shape[0], h.shape[1] * h.shape[2])
    if flat.shape[1] != model.head.weights.shape[0]:
        raise ShapeError(f"flattened features {flat.shape[1]} do not match head input "
                         f"{model.head.weights.shape[0]}; the model was built for 1 time step")
    return model.head(flat).reshape(-1)


@dataclass(frozen=True)
class AnnBaseline(Module):
    layers: tuple

    kind = "ann"

    @property
    def n_features(self) -> int:
        return self.layers[0].weights.shape[0]

    def config(self) -> dict:
        return {"hidden": [layer.weights.shape[1] for layer in self.layers[:-1]]}

    @classmethod
    def init(cls, rng: SeededRng, f: int, hidden=(32, 32)) -> "AnnBaseline":
        sizes = [f, *hidden]
        layers = [DenseLayer.init(rng, a, b, "relu") for a, b in zip(sizes[:-1], sizes[1:])]
        layers.append(DenseLayer.init(rng, sizes[-1], 1, "linear"))
        return cls(tuple(layers))

    def __call__(self, batch: Tensor) -> Tensor:
        h = _flatten_batch(T.as_tensor(batch), self.n_features)
        for layer in self.layers:
            h = layer(h)
        return h.reshape(-1)


@dataclass(frozen=True)
class LinearRegressionModel(Module):
    coefficients: Tensor  # (f,)
    intercept: Tensor  # (1,)

    kind = "linreg"

    @property
    def n_features(self) -> int:
        return self.coefficients.shape[0]

    def config(self) -> dict:
        return {}

    @classmethod
    def init(cls, rng: SeededRng, f: int) -> "LinearRegressionModel":
        return cls(Tensor(rng.uniform(-0.05, 0.05, size=(f,))), Tensor(np.zeros(1)))

    def __call__(self, batch: Tensor) -> Tensor:
        batch = T.as_tensor(batch)
        x = batch if batch.ndim == 2 else _flatten_batch(batch, self.n_features)
        if x.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {x.shape[1]}")
        return (x @ self.coefficients.reshape(-1, 1)).reshape(-1) + self.intercept


MODEL_KINDS = {"hybrid": HybridModel, "ann": AnnBaseline, "linreg": LinearRegressionModel}


def model_init(kind: str, f: int, seed: int, **dims) -> Module:
    """Deterministic fresh parameters for ``kind`` given ``(f, seed)``."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    if f < 1:
        raise ValueError(f"feature count must be >= 1, got {f}")
    return MODEL_KINDS[kind].init(SeededRng(seed), f, **dims)


def predict(model: Module, X) -> np.ndarray:
    """Forward pass without a tape, as a plain array."""
    return model(T.as_tensor(X)).numpy()


def linreg_fit(X, y) -> LinearRegressionModel:
    """Ordinary least squares through the normal equations.

    A design matrix that is rank-deficient after adding the intercept column
    raises :class:`SingularMatrixError`. Full-rank but badly conditioned Gram
    matrices get a ``1e-10`` ridge on the diagonal.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64).reshape(-1)
    if X.ndim == 3:
        X = X.reshape(X.shape[0], -1)
    n, f = X.shape
    if y.shape[0] != n:
        raise ShapeError(f"X has {n} rows but y has {y.shape[0]}")
    if n <= f:
        raise ValueError(f"need more samples than features (n={n}, f={f})")
    A = np.hstack([X, np.ones((n, 1))])
    gram = A.T @ A
    cond = np.linalg.cond(gram)
    if np.linalg.matrix_rank(A) < f + 1:
        raise SingularMatrixError(
            f"design matrix with intercept is rank-deficient (Gram condition number {cond:.3e})")
    if cond > LINREG_COND_LIMIT:
        gram = gram + LINREG_RIDGE * np.eye(f + 1)
    beta = np.linalg.solve(gram, A.T @ y)
    return LinearRegressionModel(Tensor(beta[:f]), Tensor(beta[f:]))


# ---------------------------------------------------------------------------
# checkpoints

def _skeleton(kind: str, f: int, config: dict) -> Module:
    rng = SeededRng(0)
    if kind == "hybrid":
        return HybridModel.init(rng, f, **config)
    if kind == "ann":
        return AnnBaseline.init(rng, f, hidden=tuple(config.get("hidden", (32, 32))))
    if kind == "linreg":
        return LinearRegressionModel.init(rng, f)
    raise CheckpointError(f"unknown model kind {kind!r}")


def checkpoint_dict(model: Module, seed: int, metadata: dict | None = None) -> dict:
    params = {name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
              for name, p in model.named_parameters()}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "n_features": model.n_features,
        "seed": int(seed),
        "config": model.config(),
        "parameters": params,
        "metadata": metadata or {},
    }


def save_checkpoint(path, model: Module, seed: int, metadata: dict | None = None) -> None:
    """Write a JSON checkpoint; floats use shortest round-trip repr, so reloads are bit-exact."""
    text = json.dumps(checkpoint_dict(model, seed, metadata), sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")


@dataclass
class Checkpoint:
    model: Module
    seed: int
    metadata: dict[str, Any]


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)}: {exc}") from exc
    return checkpoint_from_dict(doc)


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    try:
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a gasforecast checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
        skeleton = _skeleton(doc["kind"], int(doc["n_features"]), dict(doc["config"]))
        expected = skeleton.parameters()
        stored = doc["parameters"]
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))
            extra = sorted(set(stored) - set(expected))
            raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {extra})")
        values = {}
        for name, entry in stored.items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if arr.shape != expected[name].shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {expected[name].shape}")
            values[name] = Tensor(arr)
        model = skeleton.with_parameters(values)
        return Checkpoint(model, int(doc["seed"]), dict(doc.get("metadata", {})))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def same_parameters(a: Module, b: Module) -> bool:
    pa, pb = a.parameters(), b.parameters()
    return pa.keys() == pb.keys() and all(
        pa[k].shape == pb[k].shape and pa[k].data.tobytes() == pb[k].data.tobytes() for k in pa)

