"""Optimisation, the consensus metric, the training loop and evaluation."""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import autograd as ag
from .data import CATEGORIES, NUM_ANNOTATIONS, question_kind
from .errors import ConfigError, ContractError, DivergenceError
from .models import Batch, ModelConfig, VQAModel, cross_entropy_loss, predict_answer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    iterations: int = 5000
    dropout: float = 0.3
    seed: int = 0
    eval_interval: int = 500
    variant: str = "simple-rvau"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")

    def to_dict(self):
        return asdict(self)


# -- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor).

    Missing gradients count as zero.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


# -- metric ----------------------------------------------------------------------

def vqa_accuracy(answer, annotations, exact=False):
    """min(#annotations equal to ``answer`` / 3, 1)."""
    if len(annotations) != NUM_ANNOTATIONS:
        raise ContractError(f"expected {NUM_ANNOTATIONS} annotations, got {len(annotations)}")
    score = min(Fraction(sum(a == answer for a in annotations), 3), Fraction(1))
    return score if exact else float(score)


@dataclass
class EvalReport:
    overall: float
    per_category: dict
    count: int
    variant: str = ""
    seed: int = 0
    per_kind: dict = field(default_factory=dict)
    kind_counts: dict = field(default_factory=dict)

    def subset(self, kinds):
        """Sample-weighted accuracy over the given question kinds."""
        n = sum(self.kind_counts.get(k, 0) for k in kinds)
        if n == 0:
            return float("nan")
        return sum(self.per_kind[k] * self.kind_counts[k] for k in kinds
                   if self.kind_counts.get(k)) / n

    def line(self):
        cats = " ".join(f"{c}={self.per_category.get(c, float('nan')):.4f}" for c in CATEGORIES)
        return f"{self.variant} seed={self.seed} n={self.count} all={self.overall:.4f} {cats}"


def score_predictions(samples, answers, variant="", seed=0):
    scores = np.array([vqa_accuracy(a, s.annotations) for s, a in zip(samples, answers)])
    by_cat, by_kind = defaultdict(list), defaultdict(list)
    for s, sc in zip(samples, scores):
        by_cat[s.category].append(sc)
        by_kind[question_kind(s.question)].append(sc)
    return EvalReport(
        overall=float(scores.mean()) if len(scores) else 0.0,
        per_category={c: float(np.mean(v)) for c, v in by_cat.items()},
        count=len(samples), variant=variant, seed=seed,
        per_kind={k: float(np.mean(v)) for k, v in by_kind.items()},
        kind_counts={k: len(v) for k, v in by_kind.items()})


# -- batching ----------------------------------------------------------------------

def make_batch(samples):
    return Batch.from_arrays(np.stack([s.features for s in samples]),
                             [s.tokens for s in samples])


def sample_targets(samples, vocab, rng):
    """One annotation per sample drawn uniformly; out-of-vocab draws are redrawn.

    Returns ``(kept_indices, target_ids)``; a sample whose annotations are all
    out of vocabulary is left out.
    """
    keep, targets = [], []
    for i, s in enumerate(samples):
        valid = [a for a in s.annotations if a in vocab.answer_ids]
        if not valid:
            continue
        while True:
            a = s.annotations[rng.integers(len(s.annotations))]
            if a in vocab.answer_ids:
                break
        keep.append(i)
        targets.append(vocab.answer_ids[a])
    return keep, np.array(targets, dtype=np.int64)


def predict(model, samples, vocab, batch_size=256):
    answers = []
    with ag.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            logits = model(make_batch(chunk))[0]
            answers.extend(vocab.answers[i] for i in np.atleast_1d(predict_answer(logits)))
    return answers


def evaluate(model, samples, vocab, batch_size=256, seed=0):
    """Consensus accuracy overall and per category, dropout off."""
    if model.config.num_answers != len(vocab.answers) or model.config.vocab_size != len(vocab.tokens):
        raise ConfigError("model and dataset vocabularies differ")
    return score_predictions(samples, predict(model, samples, vocab, batch_size),
                             model.variant, seed)


# -- training ----------------------------------------------------------------------

def model_config_for(vocab, cfg, **overrides):
    base = dict(vocab_size=len(vocab.tokens), num_answers=len(vocab.answers),
                dropout=cfg.dropout, seed=cfg.seed)
    base.update(overrides)
    return ModelConfig(**base)


def named_params(model):
    return dict(model.named_parameters())


def _first_non_finite(model):
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            return f"parameter {name}"
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"gradient of {name}"
    return "loss"


@dataclass
class TrainResult:
    model: VQAModel
    optimizer: AdamState
    rng: np.random.Generator
    trace: list                  # (step, loss, val accuracy or None)
    reports: list
    best_state: dict | None = None
    best_val: float = -1.0


def train(model, samples, vocab, cfg, val_samples=None, model_config=None):
    """Mini-batch Adam on cross-entropy against one sampled annotation per visit."""
    if not samples:
        raise ContractError("training set is empty")
    rng = np.random.default_rng([cfg.seed, 99])
    params = named_params(model)
    state = AdamState()
    trace, reports = [], []
    best_state, best_val = None, -1.0
    order = rng.permutation(len(samples))
    cursor = 0
    for step in range(1, cfg.iterations + 1):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(samples))
            cursor = 0
        chunk = [samples[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        keep, targets = sample_targets(chunk, vocab, rng)
        if not keep:
            continue
        chunk = [chunk[i] for i in keep]
        for p in params.values():
            p.grad = None
        logits = model(make_batch(chunk), training=True, rng=rng)[0]
        loss = cross_entropy_loss(logits, targets)
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"non-finite loss at step {step}; first bad tensor: "
                                  f"{_first_non_finite(model)}")
        ag.backward(loss)
        grads = {n: p.grad for n, p in params.items()}
        for name, g in grads.items():
            if g is not None and not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient of {name} at step {step}")
        adam_step(params, grads, state, cfg)
        val_acc = None
        if val_samples and cfg.eval_interval and (step % cfg.eval_interval == 0
                                                   or step == cfg.iterations):
            report = evaluate(model, val_samples, vocab, seed=cfg.seed)
            report.variant = cfg.variant
            reports.append((step, report))
            val_acc = report.overall
            log.info("step %d loss %.4f val %.4f", step, float(loss.data), val_acc)
            if val_acc > best_val:
                best_val = val_acc
                best_state = {n: p.data.copy() for n, p in params.items()}
        trace.append((step, float(loss.data), val_acc))
    return TrainResult(model, state, rng, trace, reports, best_state, best_val)


def smoothed(values, window=50):
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")


def majority_answers(samples):
    return [Counter(s.annotations).most_common(1)[0][0] for s in samples]
