"""Recurrent cells used as the context extractor of dynamic layer attention.

All cells act on batched row vectors: inputs and states have shape (B, C).
Weight matrices are stored output-major, ``(out_features, in_features)``, so a
product reads ``x @ W.T``.

Four kinds are available:

``dsu``
    Dynamic Sharing Unit. No output gate, a single state vector ``c``::

        s  = relu(W1 [sigma(c_prev), y])
        c~ = tanh(W2c s + bc)
        i  = sigmoid(W2i s + bi)
        f  = sigmoid(W2f s + bf)
        c  = f * c_prev + i * c~

``lstm``
    Plain LSTM, input and hidden width both C, gate order (i, f, g, o).
``dia``
    Bottlenecked LSTM: ``relu(W1 [h_prev, y])`` followed by one joint
    projection to the four gates, with a sigmoid instead of tanh on the
    output path.
``rnn``
    Elman cell, ``h = tanh(Wy y + Wh h_prev + b)``.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

CELL_KINDS = ("dsu", "dia", "lstm", "rnn")

SIGMAS = {
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "relu": T.relu,
    "identity": T.identity,
}


class CellState(NamedTuple):
    """Recurrent state. ``h`` is None for cells without a hidden output."""

    c: Optional[Tensor]
    h: Optional[Tensor] = None


BOTTLENECKED = ("dsu", "dia")


@dataclass
class CellParams:
    kind: str
    channels: int
    reduction: int = 4
    sigma: str = "sigmoid"
    weights: dict = field(default_factory=dict)
    biases: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.kind!r}", "cell")
        if self.sigma not in SIGMAS:
            raise ConfigError(f"unknown sigma {self.sigma!r}", "sigma")
        if self.reduction < 1:
            raise ConfigError("reduction must be positive", "reduction")
        # only the bottlenecked cells need a whole hidden width C/r
        if self.kind in BOTTLENECKED and self.channels % self.reduction:
            raise ConfigError(
                f"channels {self.channels} not divisible by reduction {self.reduction}",
                "reduction",
            )

    @property
    def hidden(self):
        return self.channels // self.reduction

    def arrays(self):
        """All (name, tensor) pairs, weights first."""
        return list(self.weights.items()) + list(self.biases.items())

    def tensors(self):
        return [t for _, t in self.arrays()]


def weight_shapes(kind, channels, reduction):
    """Weight and bias shapes for one cell layout."""
    C, h = channels, channels // reduction
    if kind == "dsu":
        w = {"W1": (h, 2 * C), "W2c": (C, h), "W2i": (C, h), "W2f": (C, h)}
        b = {"bc": (C,), "bi": (C,), "bf": (C,)}
    elif kind == "lstm":
        w = {"W_ih": (4 * C, C), "W_hh": (4 * C, C)}
        b = {"b": (4 * C,)}
    elif kind == "dia":
        w = {"W1": (h, 2 * C), "W2": (4 * C, h)}
        b = {"b": (4 * C,)}
    elif kind == "rnn":
        w = {"W_y": (C, C), "W_h": (C, C)}
        b = {"b": (C,)}
    else:
        raise ConfigError(f"unknown cell kind {kind!r}", "cell")
    return w, b


def init_cell(kind, channels, reduction=4, sigma="sigmoid", rng=None, zero=False):
    """Create a cell with linear-layer init (uniform in +-sqrt(1/fan_in)), zero biases."""
    params = CellParams(kind, channels, reduction, sigma)
    rng = np.random.default_rng(0) if rng is None else rng
    wshapes, bshapes = weight_shapes(kind, channels, reduction)
    for name, shape in wshapes.items():
        bound = np.sqrt(1.0 / shape[1])
        data = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
        params.weights[name] = Tensor(data, requires_grad=True, name=name)
    for name, shape in bshapes.items():
        params.biases[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
    return params


def param_count(params, include_biases=False):
    """Count scalar parameters by walking the stored arrays."""
    n = sum(t.size for t in params.weights.values())
    if include_biases:
        n += sum(t.size for t in params.biases.values())
    return n


def _linear(x, w, b=None):
    out = T.matmul(x, T.transpose(w))
    return out if b is None else out + b


def _check(y, prev, params):
    C = params.channels
    if y.shape[-1] != C or prev.shape[-1] != C:
        raise DimensionError(
            f"{params.kind} cell expects width {C}, got y {y.shape} and state {prev.shape}"
        )


def dsu_gates(y, c_prev, params):
    """Intermediate quantities of one DSU step: ``s``, ``c_tilde``, ``i``, ``f``."""
    _check(y, c_prev, params)
    w, b = params.weights, params.biases
    s = T.relu(_linear(T.concat([SIGMAS[params.sigma](c_prev), y], axis=-1), w["W1"]))
    return {
        "s": s,
        "c_tilde": T.tanh(_linear(s, w["W2c"], b["bc"])),
        "i": T.sigmoid(_linear(s, w["W2i"], b["bi"])),
        "f": T.sigmoid(_linear(s, w["W2f"], b["bf"])),
    }


def dsu_step(y, c_prev, params):
    g = dsu_gates(y, c_prev, params)
    return g["f"] * c_prev + g["i"] * g["c_tilde"]


def lstm_gates(y, state, params):
    _check(y, state.h, params)
    C = params.channels
    w = params.weights
    z = _linear(y, w["W_ih"]) + _linear(state.h, w["W_hh"]) + params.biases["b"]
    return {
        "i": T.sigmoid(z[..., :C]),
        "f": T.sigmoid(z[..., C : 2 * C]),
        "g": T.tanh(z[..., 2 * C : 3 * C]),
        "o": T.sigmoid(z[..., 3 * C :]),
    }


def lstm_step(y, state, params):
    g = lstm_gates(y, state, params)
    c = g["f"] * state.c + g["i"] * g["g"]
    return CellState(c=c, h=g["o"] * T.tanh(c))


def dia_gates(y, state, params):
    _check(y, state.h, params)
    C = params.channels
    w = params.weights
    s = T.relu(_linear(T.concat([state.h, y], axis=-1), w["W1"]))
    z = _linear(s, w["W2"], params.biases["b"])
    return {
        "i": T.sigmoid(z[..., :C]),
        "f": T.sigmoid(z[..., C : 2 * C]),
        "o": T.sigmoid(z[..., 2 * C : 3 * C]),
        "c_tilde": T.tanh(z[..., 3 * C :]),
    }


def dia_step(y, state, params):
    g = dia_gates(y, state, params)
    c = g["f"] * state.c + g["i"] * g["c_tilde"]
    return CellState(c=c, h=g["o"] * T.sigmoid(c))


def vanilla_rnn_step(y, h_prev, params):
    _check(y, h_prev, params)
    w = params.weights
    return T.tanh(_linear(y, w["W_y"]) + _linear(h_prev, w["W_h"], params.biases["b"]))


# Uniform interface used by the attention module: every kind carries a
# CellState and exposes one output vector per step.


def initial_state(params, c0):
    if params.kind == "dsu":
        return CellState(c=c0)
    if params.kind == "rnn":
        return CellState(c=None, h=c0)
    return CellState(c=c0, h=c0)


def step(params, y, state):
    if params.kind == "dsu":
        return CellState(c=dsu_step(y, state.c, params))
    if params.kind == "lstm":
        return lstm_step(y, state, params)
    if params.kind == "dia":
        return dia_step(y, state, params)
    return CellState(c=None, h=vanilla_rnn_step(y, state.h, params))


def output(params, state):
    return state.c if params.kind == "dsu" else state.h
