"""Neural building blocks: LSTM, 1-D convolution, pooling, attention, dense.

Every layer is a frozen dataclass whose :class:`Tensor` fields are its
parameters. Forward functions are pure; to differentiate, bind the layer to a
tape with :meth:`Module.attach` and run the same forward on the copy.

Sequences are batch-first: ``(..., T, channels)``. Leading batch axes are
optional everywhere.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import SeededRng
from .tensor import GradTape, ShapeError, Tensor

LAYER_NORM_EPS = 1e-5


class Module:
    """Parameter traversal for dataclass layers and models."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, tuple) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def with_parameters(self, values: dict) -> "Module":
        """Copy of this module with parameters replaced by name.

        Values may be arrays or tensors; names not given keep their value.
        Unknown names raise ``KeyError``.
        """
        unknown = sorted(set(values) - set(self.parameters()))
        if unknown:
            raise KeyError(f"unknown parameter names: {', '.join(unknown)}")
        changes = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                if f.name in values:
                    new = values[f.name]
                    new = new if isinstance(new, Tensor) else Tensor(new)
                    if new.shape != value.shape:
                        raise ShapeError(f"parameter {f.name}: expected shape {value.shape}, got {new.shape}")
                    changes[f.name] = new
            elif isinstance(value, Module):
                sub = _strip(values, f.name + ".")
                if sub:
                    changes[f.name] = value.with_parameters(sub)
            elif isinstance(value, tuple) and value and isinstance(value[0], Module):
                items = []
                for i, m in enumerate(value):
                    sub = _strip(values, f"{f.name}.{i}.")
                    items.append(m.with_parameters(sub) if sub else m)
                changes[f.name] = tuple(items)
        return dataclasses.replace(self, **changes)

    def attach(self, tape: GradTape) -> tuple["Module", dict[str, Tensor]]:
        """Copy whose parameters are leaves of ``tape``; also returns those leaves."""
        leaves = {name: tape.watch(p) for name, p in self.named_parameters()}
        return self.with_parameters(leaves), leaves


def _strip(values: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def _check_last(x: Tensor, dim: int, what: str) -> None:
    if x.ndim < 1 or x.shape[-1] != dim:
        raise ShapeError(f"{what}: expected last dimension {dim}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# dense and normalisation

ACTIVATIONS = {"linear": lambda x: x, "relu": T.relu, "tanh": T.tanh}


@dataclass(frozen=True)
class DenseLayer(Module):
    weights: Tensor  # (in, out)
    bias: Tensor  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"dense shapes inconsistent: W {self.weights.shape}, b {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, rng: SeededRng, n_in: int, n_out: int, activation: str = "linear") -> "DenseLayer":
        w = rng.glorot_uniform((n_in, n_out), n_in, n_out)
        return cls(Tensor(w), Tensor(np.zeros(n_out)), activation)

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    _check_last(x, layer.weights.shape[0], "dense")
    if x.ndim == 1:
        x = x.reshape(1, -1)
        return ACTIVATIONS[layer.activation](x @ layer.weights + layer.bias).reshape(-1)
    return ACTIVATIONS[layer.activation](x @ layer.weights + layer.bias)


@dataclass(frozen=True)
class LayerNorm(Module):
    scale: Tensor
    shift: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNorm":
        return cls(Tensor(np.ones(dim)), Tensor(np.zeros(dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale, self.shift)


def normalize_last(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero-mean, unit-variance over the last axis (population variance)."""
    mu = T.mean(x, axis=-1, keepdims=True)
    d = x - mu
    var = T.mean(d * d, axis=-1, keepdims=True)
    return d / T.sqrt(var + eps)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = T.as_tensor(x)
    _check_last(x, scale.shape[0], "layer_norm")
    return normalize_last(x, eps) * scale + shift


# ---------------------------------------------------------------------------
# LSTM

GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class LstmLayer(Module):
    """Gate order is input, forget, output, candidate (i, f, o, g)."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    def __post_init__(self):
        n_in, hid = self.input_dim, self.hidden_dim
        for gate in GATES:
            w, u, b = (getattr(self, f"{p}_{gate}") for p in "WUb")
            if w.shape != (n_in, hid) or u.shape != (hid, hid) or b.shape != (hid,):
                raise ShapeError(f"LSTM gate {gate}: W {w.shape}, U {u.shape}, b {b.shape} "
                                 f"inconsistent with ({n_in}, {hid})")

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_i.shape[1]

    @classmethod
    def init(cls, rng: SeededRng, input_dim: int, hidden_dim: int = 64) -> "LstmLayer":
        kw = {}
        for gate in GATES:
            kw[f"W_{gate}"] = Tensor(rng.glorot_uniform((input_dim, hidden_dim), input_dim, hidden_dim))
        for gate in GATES:
            kw[f"U_{gate}"] = Tensor(rng.glorot_uniform((hidden_dim, hidden_dim), hidden_dim, hidden_dim))
        for gate in GATES:
            kw[f"b_{gate}"] = Tensor(np.full(hidden_dim, 1.0 if gate == "f" else 0.0))
        return cls(**kw)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmLayer":
        kw = {}
        for gate in GATES:
            kw[f"W_{gate}"] = Tensor(np.zeros((input_dim, hidden_dim)))
            kw[f"U_{gate}"] = Tensor(np.zeros((hidden_dim, hidden_dim)))
            kw[f"b_{gate}"] = Tensor(np.zeros(hidden_dim))
        return cls(**kw)


def lstm_step(layer: LstmLayer, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM update; inputs are ``(..., input_dim)`` and ``(..., hidden)``."""
    x, h_prev, c_prev = T.as_tensor(x), T.as_tensor(h_prev), T.as_tensor(c_prev)
    _check_last(x, layer.input_dim, "lstm_step input")
    _check_last(h_prev, layer.hidden_dim, "lstm_step h_prev")
    _check_last(c_prev, layer.hidden_dim, "lstm_step c_prev")
    vector = x.ndim == 1
    if vector:
        x, h_prev, c_prev = x.reshape(1, -1), h_prev.reshape(1, -1), c_prev.reshape(1, -1)

    def pre(gate):
        return x @ getattr(layer, f"W_{gate}") + h_prev @ getattr(layer, f"U_{gate}") + getattr(layer, f"b_{gate}")

    i = T.sigmoid(pre("i"))
    f = T.sigmoid(pre("f"))
    o = T.sigmoid(pre("o"))
    g = T.tanh(pre("g"))
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    if vector:
        return h.reshape(-1), c.reshape(-1)
    return h, c


def lstm_forward(layer: LstmLayer, sequence: Tensor) -> Tensor:
    """Hidden state at every step of ``(..., T, input_dim)``, from a zero state."""
    sequence = T.as_tensor(sequence)
    if sequence.ndim < 2 or sequence.shape[-2] == 0:
        raise ShapeError(f"lstm_forward needs a non-empty (..., T, features) sequence, got {sequence.shape}")
    _check_last(sequence, layer.input_dim, "lstm_forward")
    lead = sequence.shape[:-2]
    h = T.zeros(lead + (layer.hidden_dim,))
    c = T.zeros(lead + (layer.hidden_dim,))
    outs = []
    for t in range(sequence.shape[-2]):
        h, c = lstm_step(layer, T.select(sequence, t, axis=-2), h, c)
        outs.append(h)
    return T.stack(outs, axis=-2)


# ---------------------------------------------------------------------------
# convolution and pooling

@dataclass(frozen=True)
class Conv1dLayer(Module):
    """Same-padded cross-correlation along the time axis.

    The input is zero-padded on the right by ``kernel_size - 1`` steps, so the
    output keeps the input length.
    """

    weights: Tensor  # (filters, in_channels, kernel_size)
    bias: Tensor  # (filters,)

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[2] < 1:
            raise ShapeError(f"conv weights must be (filters, in_channels, kernel>=1), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match {self.weights.shape[0]} filters")

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def init(cls, rng: SeededRng, in_channels: int, filters: int = 32, kernel_size: int = 2) -> "Conv1dLayer":
        w = rng.glorot_uniform((filters, in_channels, kernel_size),
                               in_channels * kernel_size, filters * kernel_size)
        return cls(Tensor(w), Tensor(np.zeros(filters)))


def conv1d_forward(layer: Conv1dLayer, x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"conv1d needs (..., T>=1, channels), got {x.shape}")
    if x.shape[-1] != layer.in_channels:
        raise ShapeError(f"conv1d channel mismatch: layer expects {layer.in_channels}, input has {x.shape[-1]}")
    steps, k = x.shape[-2], layer.kernel_size
    if k > 1:
        pad = T.zeros(x.shape[:-2] + (k - 1, x.shape[-1]))
        x = T.concat([x, pad], axis=-2)
    out = None
    for tap in range(k):
        window = T.slice_axis(x, tap, tap + steps, axis=-2)
        w_tap = T.transpose(T.select(layer.weights, tap, axis=2))  # (in, filters)
        term = window @ w_tap
        out = term if out is None else out + term
    return out + layer.bias


@dataclass(frozen=True)
class MaxPool1d(Module):
    """Non-overlapping max pooling along time (stride = pool size)."""

    pool_size: int = 1

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


def maxpool_forward(pool: MaxPool1d, x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    p = pool.pool_size
    steps = x.shape[-2]
    if p > steps:
        raise ShapeError(f"pool_size {p} exceeds sequence length {steps}")
    if p == 1:
        return x
    n_win = steps // p
    if n_win * p != steps:
        x = T.slice_axis(x, 0, n_win * p, axis=-2)
    windows = x.reshape(x.shape[:-2] + (n_win, p, x.shape[-1]))
    return T.max_axis(windows, axis=-2)


# ---------------------------------------------------------------------------
# attention

def scaled_dot_product_attention(Q: Tensor, K: Tensor, V: Tensor,
                                 return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d_k)) V`` over ``(..., T, d_k)`` operands."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if not (Q.shape == K.shape and K.shape[:-1] == V.shape[:-1]) or Q.ndim < 2:
        raise ShapeError(f"attention shapes disagree: Q {Q.shape}, K {K.shape}, V {V.shape}")
    d_k = Q.shape[-1]
    scores = (Q @ T.transpose(K)) * (1.0 / math.sqrt(d_k))
    weights = T.softmax(scores)
    out = weights @ V
    return (out, weights) if return_weights else out


@dataclass(frozen=True)
class MultiHeadSelfAttention(Module):
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    heads: int = 4

    def __post_init__(self):
        dim = self.model_dim
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            if getattr(self, name).shape != (dim, dim):
                raise ShapeError(f"{name} must be ({dim}, {dim}), got {getattr(self, name).shape}")
        if self.heads < 1 or dim % self.heads:
            raise ValueError(f"model_dim {dim} is not divisible by heads={self.heads}")

    @property
    def model_dim(self) -> int:
        return self.W_Q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @classmethod
    def init(cls, rng: SeededRng, model_dim: int = 32, heads: int = 4) -> "MultiHeadSelfAttention":
        if heads < 1 or model_dim % heads:
            raise ValueError(f"model_dim {model_dim} is not divisible by heads={heads}")
        mats = [Tensor(rng.glorot_uniform((model_dim, model_dim), model_dim, model_dim)) for _ in range(4)]
        return cls(*mats, heads=heads)


def multi_head_forward(mhsa: MultiHeadSelfAttention, x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    _check_last(x, mhsa.model_dim, "multi_head_forward")
    q, k, v = x @ mhsa.W_Q, x @ mhsa.W_K, x @ mhsa.W_V
    dk = mhsa.head_dim
    heads = []
    for h in range(mhsa.heads):
        lo, hi = h * dk, (h + 1) * dk
        heads.append(scaled_dot_product_attention(
            T.slice_axis(q, lo, hi, -1), T.slice_axis(k, lo, hi, -1), T.slice_axis(v, lo, hi, -1)))
    joined = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return joined @ mhsa.W_O


@dataclass(frozen=True)
class TransformerBlock(Module):
    """Post-norm block: ``y = LN(x + MHSA(x)); out = LN(y + FFN(y))``."""

    attention: MultiHeadSelfAttention
    norm1: LayerNorm
    norm2: LayerNorm
    ffn_in: DenseLayer
    ffn_out: DenseLayer

    @property
    def model_dim(self) -> int:
        return self.attention.model_dim

    @classmethod
    def init(cls, rng: SeededRng, model_dim: int = 32, heads: int = 4, ffn_dim: int = 64) -> "TransformerBlock":
        return cls(
            attention=MultiHeadSelfAttention.init(rng, model_dim, heads),
            norm1=LayerNorm.init(model_dim),
            norm2=LayerNorm.init(model_dim),
            ffn_in=DenseLayer.init(rng, model_dim, ffn_dim, "relu"),
            ffn_out=DenseLayer.init(rng, ffn_dim, model_dim, "linear"),
        )


def transformer_block_forward(block: TransformerBlock, x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    _check_last(x, block.model_dim, "transformer_block")
    y1 = block.norm1(x + multi_head_forward(block.attention, x))
    return block.norm2(y1 + block.ffn_out(block.ffn_in(y1)))
