"""Finite-difference gradient suite over every differentiable op and the full models.

Ops are probed with the plain central difference at ``eps=1e-5``. The full
models use the fourth-order stencil at ``eps=1e-3`` (see
:func:`drau.autograd.grad_check`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attention import RAUConfig, build_attention
from .autograd import Tensor
from .fusion import FusionConfig, circular_convolve, count_sketch, make_sketch, mcb_fuse
from .layers import LSTM, Conv1x1, Embedding, PReLU, conv1x1, embed, lstm_sequence
from .models import VARIANTS, Batch, ModelConfig, VQAModel, cross_entropy_loss

TOLERANCE = 1e-4


def _param(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, 2.0, size=shape)
    return Tensor(data, requires_grad=True)


def _scalar(out, rng):
    """Contract an output with fixed random weights so every entry matters."""
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _op_cases(rng):
    """name -> (loss closure, params). Each call draws fresh inputs from ``rng``."""
    cases = {}
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    cases["add"] = (lambda: ((a + b) * w).sum(), [a, b])
    a2, b2 = _param(rng, 3, 4), _param(rng, 4)
    cases["mul"] = (lambda: _scalar(a2 * b2, np.random.default_rng(1)), [a2, b2])
    m1, m2 = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    cases["matmul"] = (lambda: _scalar(ag.matmul(m1, m2), np.random.default_rng(2)), [m1, m2])
    t = _param(rng, 5)
    cases["tanh"] = (lambda: _scalar(t.tanh(), np.random.default_rng(3)), [t])
    s = _param(rng, 5)
    cases["sigmoid"] = (lambda: _scalar(s.sigmoid(), np.random.default_rng(4)), [s])
    e = _param(rng, 5)
    cases["exp"] = (lambda: _scalar(ag.exp(e), np.random.default_rng(5)), [e])
    lg = _param(rng, 5, low=0.5)
    cases["log"] = (lambda: _scalar(ag.log(lg), np.random.default_rng(6)), [lg])
    px, ps = _param(rng, 4, 3), Tensor(rng.uniform(0.05, 0.5, size=3), requires_grad=True)
    cases["prelu"] = (lambda: _scalar(ag.prelu(px, ps), np.random.default_rng(7)), [px, ps])
    sq = _param(rng, 6)
    cases["signed_sqrt"] = (lambda: _scalar(ag.signed_sqrt(sq), np.random.default_rng(8)), [sq])
    sm = _param(rng, 2, 5)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    cases["softmax"] = (lambda: _scalar(ag.softmax(sm, axis=-1, mask=mask),
                                        np.random.default_rng(9)), [sm])
    ls = _param(rng, 2, 5)
    cases["log_softmax"] = (lambda: _scalar(ag.log_softmax(ls), np.random.default_rng(10)), [ls])
    ln = _param(rng, 3, 4)
    cases["l2_normalize"] = (lambda: _scalar(ag.l2_normalize(ln), np.random.default_rng(11)), [ln])
    sh = _param(rng, 2, 3, 4)
    cases["shape_ops"] = (lambda: _scalar(
        ag.concat([sh.sum(axis=0), sh.mean(axis=1).reshape((2, 4)),
                   ag.transpose(sh, (0, 2, 1))[:, :, 0]], axis=0), np.random.default_rng(12)), [sh])
    st = _param(rng, 3, 2)
    cases["stack_getitem"] = (lambda: _scalar(
        ag.stack([st[np.array([0, 2, 2])], st[::-1]], axis=0)[:, :2], np.random.default_rng(13)),
        [st])
    ids = np.array([[1, 2, 1]])
    tab = _param(rng, 4, 3)
    cases["take_rows"] = (lambda: _scalar(ag.take_rows(tab, ids), np.random.default_rng(14)), [tab])

    lrng = np.random.default_rng(rng.integers(1 << 31))
    conv = Conv1x1(3, 2, lrng)
    cx = _param(rng, 4, 3)
    cases["conv1x1"] = (lambda: _scalar(conv1x1(cx, conv), np.random.default_rng(15)),
                        [cx, *conv.parameters()])
    act = PReLU(2)
    act.slope.data[...] = rng.uniform(0.1, 0.4, size=2)
    ax = _param(rng, 4, 2)
    cases["prelu_layer"] = (lambda: _scalar(act(ax), np.random.default_rng(16)),
                            [ax, *act.parameters()])
    lstm = LSTM(3, 4, 2, lrng)
    lx = _param(rng, 2, 3, 3)
    cases["lstm_sequence"] = (lambda: _scalar(lstm_sequence(lx, lstm), np.random.default_rng(17)),
                              [lx, *lstm.parameters()])
    emb = Embedding(6, 3, 2, lrng, frozen_seed=0)
    toks = np.array([[2, 5, 1]])
    cases["embed"] = (lambda: _scalar(embed(toks, emb), np.random.default_rng(18)),
                      list(emb.parameters()))

    sk = make_sketch(8, 8, d=16, seed=int(rng.integers(1 << 31)))
    cs = _param(rng, 8)
    cases["count_sketch"] = (lambda: _scalar(count_sketch(cs, sk, "x"), np.random.default_rng(19)),
                             [cs])
    ca, cb = _param(rng, 16), _param(rng, 16)
    cases["circular_convolve"] = (lambda: _scalar(circular_convolve(ca, cb),
                                                  np.random.default_rng(20)), [ca, cb])
    fx, fy = _param(rng, 2, 8), _param(rng, 2, 8)
    fcfg = FusionConfig(sketch=sk)
    cases["mcb_fuse"] = (lambda: _scalar(mcb_fuse(fx, fy, fcfg), np.random.default_rng(21)),
                         [fx, fy])

    rcfg = RAUConfig(positions=4, in_channels=5, scaled_channels=4, feature_dim=5,
                     output_dim=3, glimpses=2)
    X = _param(rng, 2, 4, 5)
    amask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    for kind in ("recurrent", "conv"):
        unit = build_attention(kind, rcfg, lrng)
        cases[f"attention_{kind}"] = (
            lambda unit=unit: _scalar(unit(X, X, mask=amask)[0], np.random.default_rng(22)),
            [X, *unit.parameters()])
    return cases


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


@dataclass
class SuiteResult:
    worst: dict = field(default_factory=dict)      # case -> max relative error
    stats: dict = field(default_factory=lambda: {"checked": 0, "skipped_branch": 0,
                                                  "skipped_rough": 0})

    @property
    def max_error(self):
        return max(self.worst.values(), default=0.0)

    def failures(self, tolerance=TOLERANCE):
        return {k: v for k, v in self.worst.items() if not v < tolerance}

    def skip_fraction(self):
        total = sum(self.stats.values())
        return (self.stats["skipped_branch"] + self.stats["skipped_rough"]) / max(total, 1)


def _merge(result, name, err, stats):
    result.worst[name] = max(result.worst.get(name, 0.0), err)
    for k, v in stats.items():
        result.stats[k] += v


# Cases whose round-off swamps a 1e-5 central difference get the wider
# fourth-order stencil. In MCB the square root after the FFT convolution turns
# ~1e-16 round-off in a near-empty sketch bin into ~1e-8 output noise; the
# recurrent cases accumulate round-off across time steps.
WIDE = dict(eps=1e-3, stencil=4)
WIDE_STENCIL = {"mcb_fuse": WIDE, "lstm_sequence": WIDE, "attention_recurrent": WIDE}


def run_op_suite(seeds=range(10), result=None):
    result = result or SuiteResult()
    for seed in seeds:
        rng = np.random.default_rng([seed, 1])
        for name, (f, params) in _op_cases(rng).items():
            stats = {}
            opts = WIDE_STENCIL.get(name, dict(eps=1e-5))
            err = ag.grad_check(f, params, rng=np.random.default_rng(seed), stats=stats, **opts)
            _merge(result, name, err, stats)
    return result


def toy_batch(rng, cfg):
    feats = rng.normal(size=(2, cfg.num_regions, cfg.region_dim))
    return Batch.from_arrays(feats, [[1, 2, 3], [4, 5]])


def run_model_suite(seeds=range(10), variants=tuple(VARIANTS), max_coords=4, result=None):
    """Every parameter tensor of every variant, ``max_coords`` coordinates each."""
    result = result or SuiteResult()
    for seed in seeds:
        rng = np.random.default_rng([seed, 2])
        cfg = ModelConfig.toy(seed=seed)
        batch = toy_batch(rng, cfg)
        targets = np.array([1, 3])
        for v in variants:
            model = VQAModel(cfg, v)
            stats = {}
            err = ag.grad_check(lambda: cross_entropy_loss(model(batch)[0], targets),
                                model.parameters(), eps=1e-3, stencil=4, max_coords=max_coords,
                                rng=np.random.default_rng(seed), stats=stats)
            _merge(result, f"model:{v}", err, stats)
    return result
