"""Recurrent attention unit and the convolutional attention it is compared with.

Both units share the same tail: per-glimpse softmax weights over the K
positions, a weighted average of the features, and a PReLU fully-connected
output. They differ only in how the glimpse logits are produced. The
recurrent unit scans the scaled features with an LSTM (so the weight at
position n depends on positions before it); the convolutional unit scores
every position independently with two stacked 1x1 convolutions.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DegenerateInputError, DimensionError
from .layers import LSTM, ConvPReLU, Module, lstm_sequence

PARAM_TOLERANCE = 0.02


@dataclass(frozen=True)
class RAUConfig:
    positions: int          # K
    in_channels: int        # width of X
    scaled_channels: int    # width after the first 1x1 conv
    feature_dim: int        # width of the pooled features f
    output_dim: int = 64    # per glimpse
    glimpses: int = 2
    lstm_hidden: int | None = None   # defaults to scaled_channels
    target: str = "visual"
    combine: str = "concat"

    def __post_init__(self):
        dims = (self.positions, self.in_channels, self.scaled_channels,
                self.feature_dim, self.output_dim, self.glimpses)
        if min(dims) < 1:
            raise ConfigError(f"attention dims must be positive: {self}")
        if self.target not in ("visual", "textual"):
            raise ConfigError(f"target must be visual or textual, got {self.target!r}")
        if self.combine not in ("concat", "sum"):
            raise ConfigError(f"combine must be concat or sum, got {self.combine!r}")

    @property
    def hidden(self):
        return self.scaled_channels if self.lstm_hidden is None else self.lstm_hidden

    @property
    def pooled_dim(self):
        return self.feature_dim * (self.glimpses if self.combine == "concat" else 1)

    @property
    def out_width(self):
        return self.output_dim * (self.glimpses if self.combine == "concat" else 1)


@dataclass
class AttentionMap:
    """Normalised weights, shape ``(G, K)`` or batched ``(B, G, K)``."""
    weights: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def glimpses(self):
        return self.weights.shape[-2]

    def glimpse(self, g, sample=None):
        w = self.weights if sample is None else self.weights[sample]
        return w[g]

    def sample(self, b, labels=None):
        return AttentionMap(self.weights[b], list(labels or self.labels))


# -- stage ops -----------------------------------------------------------------

def scale_input(X, unit):
    """1x1 convolution + PReLU that shrinks the joint input."""
    return unit.scale(X)


def recur(c, unit):
    """Hidden state of the attention LSTM at every position, scanned in order."""
    return lstm_sequence(c, unit.lstm)


def glimpse_weights(h, unit, mask=None):
    """Per-glimpse softmax over positions of PReLU(1x1 conv(h)).

    Returns a ``(..., G, K)`` tensor; masked positions get exactly zero.
    """
    logits = unit.glimpse(h)                                   # (..., K, G)
    axes = tuple(range(logits.ndim - 2)) + (logits.ndim - 1, logits.ndim - 2)
    logits = ag.transpose(logits, axes)                        # (..., G, K)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != logits.shape[-1]:
            raise DimensionError(f"mask length {mask.shape[-1]} for K={logits.shape[-1]}")
        if not mask.any(axis=-1).all():
            raise DegenerateInputError("attention input is fully masked")
        mask = mask[..., None, :]
    return ag.softmax(logits, axis=-1, mask=mask)


def apply_attention(weights, f):
    """Weighted average of feature rows: row g = sum_n weights[g, n] f[n]."""
    if weights.shape[-1] != f.shape[-2]:
        raise DimensionError(
            f"apply_attention: {weights.shape[-1]} weights for {f.shape[-2]} feature rows")
    return ag.matmul(weights, f)


def attention_output(att, unit):
    """Combine glimpses (concat or sum) and apply the PReLU output layer."""
    if unit.config.combine == "concat":
        pooled = att.reshape(att.shape[:-2] + (att.shape[-2] * att.shape[-1],))
    else:
        pooled = att.sum(axis=-2)
    return unit.out(pooled)


# -- units ---------------------------------------------------------------------

class _AttentionBase(Module):
    def _check(self, X, f, mask):
        K = X.shape[-2]
        if f.shape[-2] != K:
            raise DimensionError(f"X has {K} positions but f has {f.shape[-2]}")
        if X.shape[-1] != self.config.in_channels:
            raise DimensionError(
                f"X has {X.shape[-1]} channels, unit expects {self.config.in_channels}")
        if f.shape[-1] != self.config.feature_dim:
            raise DimensionError(
                f"f has width {f.shape[-1]}, unit expects {self.config.feature_dim}")
        if mask is not None and np.asarray(mask).shape[-1] != K:
            raise DimensionError(f"mask length {np.asarray(mask).shape[-1]} for K={K}")

    def _make_output(self, cfg, rng):
        self.out = ConvPReLU(cfg.pooled_dim, cfg.out_width, rng)


class RAU(_AttentionBase):
    kind = "recurrent"

    def __init__(self, config, rng):
        self.config = config
        self.scale = ConvPReLU(config.in_channels, config.scaled_channels, rng)
        self.lstm = LSTM(config.scaled_channels, config.hidden, 1, rng)
        self.glimpse = ConvPReLU(config.hidden, config.glimpses, rng)
        self._make_output(config, rng)

    def __call__(self, X, f, mask=None, labels=None):
        return rau_forward(X, f, self, mask, labels)


class ConvAttention(_AttentionBase):
    """Two stacked 1x1 convolutions score each position independently."""
    kind = "conv"

    def __init__(self, config, hidden, rng):
        self.config = config
        self.hidden = hidden
        self.conv1 = ConvPReLU(config.in_channels, hidden, rng)
        self.glimpse = ConvPReLU(hidden, config.glimpses, rng)
        self._make_output(config, rng)

    def __call__(self, X, f, mask=None, labels=None):
        return conv_attention_forward(X, f, self, mask, labels)


def rau_forward(X, f, unit, mask=None, labels=None):
    unit._check(X, f, mask)
    c = scale_input(X, unit)
    h = recur(c, unit)
    w = glimpse_weights(h, unit, mask)
    att = apply_attention(w, f)
    y = attention_output(att, unit)
    return y, AttentionMap(w.data, list(labels or []))


def conv_attention_forward(X, f, unit, mask=None, labels=None):
    unit._check(X, f, mask)
    w = glimpse_weights(unit.conv1(X), unit, mask)
    att = apply_attention(w, f)
    y = attention_output(att, unit)
    return y, AttentionMap(w.data, list(labels or []))


# -- parameter matching --------------------------------------------------------

def _conv_prelu_count(n_in, n_out):
    return n_in * n_out + 2 * n_out


def rau_parameter_count(cfg):
    """Trainable parameters of a recurrent unit. ``lstm_hidden=0`` counts a
    unit with the LSTM removed (glimpse conv reads the scaled features)."""
    s, h, G = cfg.scaled_channels, cfg.hidden, cfg.glimpses
    total = _conv_prelu_count(cfg.in_channels, s)
    if h > 0:
        total += (s + h) * 4 * h + 4 * h
        total += _conv_prelu_count(h, G)
    else:
        total += _conv_prelu_count(s, G)
    return total + _conv_prelu_count(cfg.pooled_dim, cfg.out_width)


def conv_parameter_count(cfg, hidden):
    return (_conv_prelu_count(cfg.in_channels, hidden)
            + _conv_prelu_count(hidden, cfg.glimpses)
            + _conv_prelu_count(cfg.pooled_dim, cfg.out_width))


@dataclass(frozen=True)
class Sizing:
    conv_hidden: int
    rau_count: int
    conv_count: int

    @property
    def relative_gap(self):
        return abs(self.conv_count - self.rau_count) / self.rau_count


def match_parameter_counts(cfg, tolerance=PARAM_TOLERANCE):
    """Conv-attention hidden width whose parameter count is closest to the RAU's."""
    target = rau_parameter_count(cfg)
    fixed = conv_parameter_count(cfg, 0)
    per_unit = cfg.in_channels + 2 + cfg.glimpses
    guess = max(1, round((target - fixed) / per_unit))
    best = min((w for w in (guess - 1, guess, guess + 1) if w >= 1),
               key=lambda w: abs(conv_parameter_count(cfg, w) - target))
    sizing = Sizing(best, target, conv_parameter_count(cfg, best))
    if sizing.relative_gap > tolerance:
        warnings.warn(f"closest conv attention ({sizing.conv_count} params) is "
                      f"{sizing.relative_gap:.1%} away from the RAU ({target})")
    return sizing


def build_attention(kind, cfg, rng):
    if kind in ("recurrent", "rau"):
        return RAU(cfg, rng)
    if kind == "conv":
        return ConvAttention(cfg, match_parameter_counts(cfg).conv_hidden, rng)
    raise ConfigError(f"unknown attention kind {kind!r}")
