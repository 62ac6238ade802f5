"""Parameterised building blocks: 1x1 convolution, PReLU, embeddings, LSTM."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DegenerateInputError, DimensionError, VocabLookupError
from .init import glorot_init, uniform_init

PRELU_INIT = 0.25
FORGET_BIAS = 1.0


class Module:
    """Anything holding trainable tensors, possibly in nested modules."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class PReLU(Module):
    def __init__(self, channels):
        self.slope = Tensor(np.full(channels, PRELU_INIT), requires_grad=True)

    def __call__(self, x):
        return ag.prelu(x, self.slope)


class Conv1x1(Module):
    """Per-location affine map over the last axis: ``x @ weight + bias``.

    A 1x1 convolution over K locations is exactly this map applied to each
    of the K rows, so it doubles as the fully-connected layer.
    """

    def __init__(self, in_channels, out_channels, rng):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = glorot_init((in_channels, out_channels), rng)
        self.bias = glorot_init((out_channels,), rng)

    def __call__(self, x):
        return conv1x1(x, self)


Linear = Conv1x1


def conv1x1(x, p):
    if x.shape[-1] != p.weight.shape[0]:
        raise DimensionError(
            f"conv1x1: input has {x.shape[-1]} channels, weight expects {p.weight.shape[0]}")
    if x.ndim == 1:
        return ag.reshape(ag.matmul(ag.reshape(x, (1, -1)), p.weight), (-1,)) + p.bias
    return ag.matmul(x, p.weight) + p.bias


class ConvPReLU(Module):
    """1x1 convolution followed by PReLU: the joint-representation projection."""

    def __init__(self, in_channels, out_channels, rng):
        self.conv = Conv1x1(in_channels, out_channels, rng)
        self.act = PReLU(out_channels)

    def __call__(self, x):
        return self.act(self.conv(x))


class LSTM(Module):
    """Stacked unidirectional LSTM.

    Layer ``l`` keeps one fused weight of shape ``(in_l + hidden, 4 * hidden)``
    with gate blocks ordered input, forget, output, candidate.
    """

    def __init__(self, input_size, hidden_size, num_layers, rng):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.weights = []
        self.biases = []
        for layer in range(num_layers):
            fan_in = input_size if layer == 0 else hidden_size
            self.weights.append(uniform_init((fan_in + hidden_size, 4 * hidden_size), rng))
            bias = np.zeros(4 * hidden_size)
            bias[hidden_size:2 * hidden_size] = FORGET_BIAS
            self.biases.append(Tensor(bias, requires_grad=True))

    def layer_input_size(self, layer):
        return self.input_size if layer == 0 else self.hidden_size


def _gates(z, c_prev, hidden):
    H = hidden
    i = ag.sigmoid(z[..., :H])
    f = ag.sigmoid(z[..., H:2 * H])
    o = ag.sigmoid(z[..., 2 * H:3 * H])
    g = ag.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * ag.tanh(c)
    return h, c


def lstm_step(x_t, h_prev, c_prev, p, layer=0):
    """One LSTM cell update; returns ``(h_t, c_t)``."""
    n_in = p.layer_input_size(layer)
    H = p.hidden_size
    if x_t.shape[-1] != n_in or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise DimensionError(
            f"lstm_step: got x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for input {n_in}, hidden {H}")
    z = ag.matmul(ag.concat([x_t, h_prev], axis=-1), p.weights[layer]) + p.biases[layer]
    return _gates(z, c_prev, H)


def _run_layer(xs, p, layer):
    # xs: (..., N, d). The input projection for all steps is one matmul.
    H = p.hidden_size
    n_in = p.layer_input_size(layer)
    W = p.weights[layer]
    x_proj = ag.matmul(xs, W[:n_in]) + p.biases[layer]
    W_h = W[n_in:]
    lead = xs.shape[:-2]
    h = Tensor(np.zeros(lead + (H,)))
    c = Tensor(np.zeros(lead + (H,)))
    outs = []
    for t in range(xs.shape[-2]):
        z = x_proj[..., t, :] + ag.matmul(h, W_h) if t else x_proj[..., t, :]
        h, c = _gates(z, c, H)
        outs.append(h)
    return ag.stack(outs, axis=-2)


def lstm_sequence(xs, p, dropout=0.0, training=False, rng=None):
    """Hidden states of every layer at every step, concatenated per step.

    ``xs`` is ``(N, d)`` or ``(B, N, d)``; the result is ``(..., N, layers * H)``
    with zero initial state. ``dropout`` is applied to each layer's output
    sequence in training mode before it feeds the next layer.
    """
    if xs.ndim < 2 or xs.shape[-2] == 0:
        raise DegenerateInputError("lstm_sequence: empty sequence")
    if xs.shape[-1] != p.input_size:
        raise DimensionError(
            f"lstm_sequence: input width {xs.shape[-1]}, expected {p.input_size}")
    layer_outs = []
    inp = xs
    for layer in range(p.num_layers):
        out = _run_layer(inp, p, layer)
        out = ag.dropout(out, dropout, training, rng)
        layer_outs.append(out)
        inp = out
    return ag.concat(layer_outs, axis=-1)


class Embedding(Module):
    """Learned table (tanh-activated) next to a frozen random stand-in for
    pretrained word vectors. Frozen rows are unit-norm and never updated."""

    def __init__(self, vocab_size, learned_dim, frozen_dim, rng, frozen_seed=None):
        self.vocab_size = vocab_size
        self.learned = glorot_init((vocab_size, learned_dim), rng)
        frng = np.random.default_rng(frozen_seed) if frozen_seed is not None else rng
        table = frng.normal(size=(vocab_size, frozen_dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.frozen = Tensor(table, requires_grad=False)

    @property
    def dim(self):
        return self.learned.shape[1] + self.frozen.shape[1]

    def __call__(self, tokens):
        return embed(tokens, self)


def embed(tokens, tables):
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= tables.vocab_size):
        raise VocabLookupError(f"token id out of range [0, {tables.vocab_size})")
    return ag.concat([ag.tanh(ag.take_rows(tables.learned, ids)),
                      ag.take_rows(tables.frozen, ids)], axis=-1)
