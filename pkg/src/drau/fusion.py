"""Multimodal fusion: compact bilinear pooling plus Hadamard/concat baselines.

Compact bilinear pooling count-sketches both inputs into ``d`` bins and
convolves the sketches circularly; the result equals the count sketch of the
outer product under the pair hash ``(h_x(i) + h_y(j)) mod d`` with sign
``s_x(i) * s_y(j)``. The convolution runs through a radix-2 FFT.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError

DEFAULT_SKETCH_DIM = 1024


# -- FFT -----------------------------------------------------------------------

def next_pow2(n):
    if n < 1:
        raise ConfigError(f"sketch dimension must be >= 1, got {n}")
    return 1 << (n - 1).bit_length()


@lru_cache(maxsize=None)
def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m, inverse):
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)


def fft(x, inverse=False):
    """Iterative radix-2 DFT along the last axis (length must be 2**k).

    The inverse includes the 1/n factor.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n & (n - 1):
        raise DimensionError(f"fft length {n} is not a power of two")
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        blocks = a.reshape(lead + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(m, inverse)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return a / n if inverse else a


def ifft(x):
    return fft(x, inverse=True)


# -- count sketch --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SketchParams:
    n_x: int
    n_y: int
    d: int
    h_x: np.ndarray = field(repr=False)
    h_y: np.ndarray = field(repr=False)
    s_x: np.ndarray = field(repr=False)
    s_y: np.ndarray = field(repr=False)
    seed: int = 0

    def hashes(self, which):
        if which == "x":
            return self.h_x, self.s_x
        if which == "y":
            return self.h_y, self.s_y
        raise ValueError(f"which must be 'x' or 'y', got {which!r}")

    def __post_init__(self):
        for which in ("x", "y"):
            h, s = self.hashes(which)
            m = np.zeros((len(h), self.d))
            m[np.arange(len(h)), h] = s
            object.__setattr__(self, f"_m_{which}", m)

    def matrix(self, which):
        """Dense (n, d) sketch matrix with s(i) at column h(i) of row i."""
        self.hashes(which)
        return getattr(self, f"_m_{which}")


def make_sketch(n_x, n_y, d=DEFAULT_SKETCH_DIM, seed=0):
    """Random hash/sign maps; ``d`` is rounded up to a power of two."""
    d = next_pow2(d)
    rng = np.random.default_rng(seed)
    return SketchParams(
        n_x=n_x, n_y=n_y, d=d,
        h_x=rng.integers(0, d, size=n_x), h_y=rng.integers(0, d, size=n_y),
        s_x=rng.choice([-1.0, 1.0], size=n_x), s_y=rng.choice([-1.0, 1.0], size=n_y),
        seed=seed)


def count_sketch(x, p, which="x"):
    """out[j] = sum over i with h(i) = j of s(i) * x[i]; batched over leading axes."""
    h, _ = p.hashes(which)
    if x.shape[-1] != len(h):
        raise DimensionError(f"count_sketch: input length {x.shape[-1]}, sketch expects {len(h)}")
    return ag.matmul(x if x.ndim > 1 else ag.reshape(x, (1, -1)),
                     Tensor(p.matrix(which))).reshape(x.shape[:-1] + (p.d,))


def circular_convolve(a, b):
    """Circular convolution along the last axis via FFT, with a hand-written
    backward: each input's gradient is the circular correlation of the
    upstream gradient with the other input."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"circular_convolve: lengths {a.shape[-1]} and {b.shape[-1]}")
    fa, fb = fft(a.data), fft(b.data)
    out = ifft(fa * fb).real

    def bw(g):
        fg = fft(g)
        ga = ifft(fg * np.conj(fb)).real
        gb = ifft(fg * np.conj(fa)).real
        return ag._unbroadcast(ga, a.shape), ag._unbroadcast(gb, b.shape)
    return ag._node(out, (a, b), bw, "circular_convolve")


# -- fusion --------------------------------------------------------------------

@dataclass(frozen=True)
class FusionConfig:
    kind: str = "mcb"
    sketch: SketchParams | None = None
    signed_sqrt: bool = True
    l2_normalize: bool = True

    def __post_init__(self):
        if self.kind not in ("mcb", "hadamard", "concat"):
            raise ConfigError(f"unknown fusion kind {self.kind!r}")
        if self.kind == "mcb" and self.sketch is None:
            raise ConfigError("mcb fusion needs sketch parameters")

    def output_dim(self, n_x, n_y):
        if self.kind == "mcb":
            return self.sketch.d
        if self.kind == "concat":
            return n_x + n_y
        return n_x


def mcb_fuse(x, y, cfg):
    if cfg.kind != "mcb":
        raise ConfigError(f"mcb_fuse called with fusion kind {cfg.kind!r}")
    p = cfg.sketch
    if x.shape[-1] != p.n_x or y.shape[-1] != p.n_y:
        raise DimensionError(
            f"mcb_fuse: inputs {x.shape[-1]}, {y.shape[-1]}; sketch built for {p.n_x}, {p.n_y}")
    z = circular_convolve(count_sketch(x, p, "x"), count_sketch(y, p, "y"))
    if cfg.signed_sqrt:
        z = ag.signed_sqrt(z)
    if cfg.l2_normalize:
        z = ag.l2_normalize(z, axis=-1)
    return z


def fuse(x, y, cfg):
    if cfg.kind == "mcb":
        return mcb_fuse(x, y, cfg)
    if cfg.kind == "hadamard":
        if x.shape[-1] != y.shape[-1]:
            raise DimensionError(f"hadamard fusion of widths {x.shape[-1]} and {y.shape[-1]}")
        return ag.mul(x, y)
    return ag.concat([x, y], axis=-1)
