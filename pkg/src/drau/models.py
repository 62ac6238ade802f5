"""Simple Net and the dual-attention VQA models.

Both start from the same encoders: the question goes through an embedding
(tanh of a learned table next to a frozen table) and a two-layer LSTM whose
per-word hidden states of both layers are kept; region features are
l2-normalised and projected with a 1x1 conv + PReLU. Simple Net attends over
regions only. The dual models attend over regions and words separately,
fuse the two attended vectors, and classify.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .attention import RAUConfig, build_attention
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError
from .fusion import FusionConfig, fuse, make_sketch
from .layers import LSTM, Conv1x1, ConvPReLU, Embedding, Module, lstm_sequence

# variant id -> (architecture, visual attention, textual attention)
VARIANTS = {
    "simple-conv": ("simple", "conv", None),
    "simple-rvau": ("simple", "recurrent", None),
    "dca": ("dual", "conv", "conv"),
    "dca-rvau": ("dual", "recurrent", "conv"),
    "dca-rtau": ("dual", "conv", "recurrent"),
    "drau": ("dual", "recurrent", "recurrent"),
}

# fixed stream ids so every variant initialises shared parts identically
_STREAMS = {"question": 1, "image": 2, "summary": 3, "visual": 4,
            "textual": 5, "classifier": 6, "frozen": 7, "sketch": 8}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_answers: int
    num_regions: int = 16
    region_dim: int = 20
    embed_dim: int = 32
    frozen_dim: int = 32
    question_hidden: int = 64
    question_layers: int = 2
    joint_dim: int = 64
    summary_dim: int = 64
    attention_channels: int = 64
    attention_output: int = 64
    glimpses: int = 2
    sketch_dim: int = 1024
    fusion: str = "mcb"
    signed_sqrt: bool = True
    l2_fused: bool = True
    dropout: float = 0.3
    seed: int = 0

    @property
    def question_width(self):
        return self.question_layers * self.question_hidden

    def to_dict(self):
        return asdict(self)

    @classmethod
    def toy(cls, **overrides):
        """Tiny dims used by gradient checks."""
        base = dict(vocab_size=10, num_answers=5, num_regions=4, region_dim=6,
                    embed_dim=4, frozen_dim=4, question_hidden=8, joint_dim=8,
                    summary_dim=8, attention_channels=8, attention_output=8,
                    glimpses=2, sketch_dim=16)
        base.update(overrides)
        return cls(**base)


@dataclass
class Batch:
    """Padded batch: ``features (B, K, phi)``, ``tokens (B, N)`` right-padded
    with 0, ``lengths (B,)``."""
    features: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray
    words: list | None = None

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def mask(self):
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]

    @classmethod
    def from_arrays(cls, features, token_lists, words=None):
        lengths = np.array([len(t) for t in token_lists], dtype=np.int64)
        if (lengths == 0).any():
            raise DegenerateInputError("empty question")
        tokens = np.zeros((len(token_lists), lengths.max()), dtype=np.int64)
        for i, t in enumerate(token_lists):
            tokens[i, :len(t)] = t
        return cls(np.asarray(features, dtype=np.float64), tokens, lengths, words)


def _rng(seed, stream):
    return np.random.default_rng([seed, _STREAMS[stream]])


class QuestionEncoder(Module):
    def __init__(self, cfg):
        rng = _rng(cfg.seed, "question")
        self.embedding = Embedding(cfg.vocab_size, cfg.embed_dim, cfg.frozen_dim, rng,
                                   frozen_seed=[cfg.seed, _STREAMS["frozen"]])
        self.lstm = LSTM(self.embedding.dim, cfg.question_hidden, cfg.question_layers, rng)
        self.dropout = cfg.dropout


def encode_question(tokens, enc, training=False, rng=None):
    """Per-word hidden states of every LSTM layer, ``(..., N, layers * H)``."""
    tokens = np.asarray(tokens)
    if tokens.size == 0 or tokens.shape[-1] == 0:
        raise DegenerateInputError("empty question")
    return lstm_sequence(enc.embedding(tokens), enc.lstm, enc.dropout, training, rng)


class ImageEncoder(Module):
    def __init__(self, cfg):
        self.num_regions = cfg.num_regions
        self.project = ConvPReLU(cfg.region_dim, cfg.joint_dim, _rng(cfg.seed, "image"))


def encode_image(regions, enc):
    regions = ag.as_tensor(regions)
    if regions.shape[-2] != enc.num_regions:
        raise DimensionError(f"expected {enc.num_regions} regions, got {regions.shape[-2]}")
    return enc.project(ag.l2_normalize(regions, axis=-1))


class Summaries(Module):
    """Projections of each modality that get tiled onto the other one."""

    def __init__(self, cfg, textual):
        rng = _rng(cfg.seed, "summary")
        self.question = ConvPReLU(cfg.question_width, cfg.summary_dim, rng)
        self.image = ConvPReLU(cfg.joint_dim, cfg.summary_dim, rng) if textual else None


def _tile(v, n):
    # (..., d) -> (..., n, d)
    return ag.broadcast_to(ag.reshape(v, v.shape[:-1] + (1, v.shape[-1])),
                           v.shape[:-1] + (n, v.shape[-1]))


def last_hidden(Q, lengths):
    lengths = np.asarray(lengths)
    if Q.ndim == 2:
        return Q[int(lengths) - 1]
    return Q[np.arange(Q.shape[0]), lengths - 1]


def joint_representation(V, Q, summaries, lengths):
    """``X_vis = V_n (+) tile(q_bar)``, ``X_txt = Q_n (+) tile(v_bar)``.

    ``q_bar`` projects the question state at the last real word; ``v_bar``
    projects the mean region feature. ``X_txt`` is None without an image
    summary projection (Simple Net).
    """
    q_bar = summaries.question(last_hidden(Q, lengths))
    X_vis = ag.concat([V, _tile(q_bar, V.shape[-2])], axis=-1)
    if summaries.image is None:
        return X_vis, None
    v_bar = summaries.image(V.mean(axis=-2))
    X_txt = ag.concat([Q, _tile(v_bar, Q.shape[-2])], axis=-1)
    return X_vis, X_txt


class VQAModel(Module):
    def __init__(self, cfg, variant):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        self.config = cfg
        self.variant = variant
        arch, vis_kind, txt_kind = VARIANTS[variant]
        self.arch = arch
        self.question = QuestionEncoder(cfg)
        self.image = ImageEncoder(cfg)
        self.summaries = Summaries(cfg, textual=txt_kind is not None)

        vis_width = cfg.joint_dim + cfg.summary_dim
        self.visual_config = RAUConfig(
            positions=cfg.num_regions, in_channels=vis_width,
            scaled_channels=cfg.attention_channels, feature_dim=vis_width,
            output_dim=cfg.attention_output, glimpses=cfg.glimpses, target="visual")
        self.visual = build_attention(vis_kind, self.visual_config, _rng(cfg.seed, "visual"))
        self.textual = None
        self.textual_config = None
        if txt_kind is not None:
            txt_width = cfg.question_width + cfg.summary_dim
            self.textual_config = RAUConfig(
                positions=1, in_channels=txt_width,
                scaled_channels=cfg.attention_channels, feature_dim=txt_width,
                output_dim=cfg.attention_output, glimpses=cfg.glimpses, target="textual")
            self.textual = build_attention(txt_kind, self.textual_config,
                                           _rng(cfg.seed, "textual"))

        width = self.visual_config.out_width
        self.fusion = None
        if arch == "dual":
            sketch = None
            if cfg.fusion == "mcb":
                sketch = make_sketch(width, width, cfg.sketch_dim,
                                     seed=int(np.random.SeedSequence(
                                         [cfg.seed, _STREAMS["sketch"]]).generate_state(1)[0]))
            self.fusion = FusionConfig(cfg.fusion, sketch, cfg.signed_sqrt, cfg.l2_fused)
            width = self.fusion.output_dim(width, width)
        self.classifier = Conv1x1(width, cfg.num_answers, _rng(cfg.seed, "classifier"))

    @property
    def attention_kinds(self):
        return (self.visual.kind, None if self.textual is None else self.textual.kind)

    def __call__(self, batch, training=False, rng=None, trace=None):
        if self.arch == "simple":
            return simple_net_forward(batch, self, training, rng, trace), None, None
        return drau_forward(batch, self, training, rng, trace)


def _encode(batch, model, training, rng, trace):
    Q = encode_question(batch.tokens, model.question, training, rng)
    V = encode_image(batch.features, model.image)
    X_vis, X_txt = joint_representation(V, Q, model.summaries, batch.lengths)
    if trace is not None:
        trace.update(Q=Q.data, V=V.data, X_vis=X_vis.data)
        if X_txt is not None:
            trace["X_txt"] = X_txt.data
    return X_vis, X_txt


def simple_net_forward(batch, model, training=False, rng=None, trace=None):
    """Logits ``(B, A)`` from a single visual attention over the joint regions."""
    if model.textual is not None:
        raise ConfigError("Simple Net takes a visual attention unit only")
    X_vis, _ = _encode(batch, model, training, rng, trace)
    y, vis_map = model.visual(X_vis, X_vis)
    if trace is not None:
        trace.update(y_vis=y.data, visual_map=vis_map)
    return model.classifier(y)


def drau_forward(batch, model, training=False, rng=None, trace=None):
    """Returns ``(logits, visual AttentionMap, textual AttentionMap)``."""
    if model.textual is None or model.visual is None or model.fusion is None:
        raise ConfigError("the dual model needs both attention units and a fusion")
    X_vis, X_txt = _encode(batch, model, training, rng, trace)
    y_text, txt_map = model.textual(X_txt, X_txt, mask=batch.mask)
    y_vis, vis_map = model.visual(X_vis, X_vis)
    fused = fuse(y_text, y_vis, model.fusion)
    fused = ag.dropout(fused, model.config.dropout, training, rng)
    if trace is not None:
        trace.update(y_text=y_text.data, y_vis=y_vis.data, fused=fused.data)
    return model.classifier(fused), vis_map, txt_map


def predict_answer(logits):
    """Argmax over the last axis; ties go to the lowest index."""
    scores = logits.data if isinstance(logits, ag.Tensor) else np.asarray(logits)
    if scores.size == 0 or scores.shape[-1] == 0:
        raise ContractError("predict_answer on empty scores")
    out = np.argmax(scores, axis=-1)
    return int(out) if out.ndim == 0 else out


def cross_entropy_loss(logits, targets):
    """Mean of -log softmax(logits)[target] over the batch."""
    logits = ag.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    A = logits.shape[-1]
    if (targets < 0).any() or (targets >= A).any():
        raise ContractError(f"target outside [0, {A})")
    logp = ag.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return -logp[int(targets)]
    picked = logp[np.arange(logits.shape[0]), targets]
    return -picked.mean()
