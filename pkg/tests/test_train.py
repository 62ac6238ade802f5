from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drau.autograd import Tensor
from drau.data import DataConfig, Vocab, consensus_ceiling, generate_split
from drau.errors import ConfigError, ContractError, DivergenceError
from drau.models import ModelConfig, VQAModel
from drau.train import (AdamState, TrainConfig, adam_step, evaluate, majority_answers,
                        model_config_for, sample_targets, score_predictions, smoothed, train,
                        vqa_accuracy)

SMALL = dict(embed_dim=8, frozen_dim=8, question_hidden=12, joint_dim=12, summary_dim=12,
             attention_channels=12, attention_output=12, sketch_dim=64)


@pytest.fixture(scope="module")
def tiny_data():
    train_s, vocab = generate_split(120, "train", seed=5, config=DataConfig(rho=0.0))
    val_s, _ = generate_split(60, "val", seed=5, config=DataConfig(rho=0.0))
    return train_s, val_s, vocab


def test_metric_exhaustive():
    for c in range(11):
        ann = ["a"] * c + ["b"] * (10 - c)
        assert vqa_accuracy("a", ann, exact=True) == min(Fraction(c, 3), Fraction(1))


def test_metric_values_are_thirds():
    assert {vqa_accuracy("a", ["a"] * c + ["b"] * (10 - c), exact=True)
            for c in range(11)} == {0, Fraction(1, 3), Fraction(2, 3), 1}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["yes", "no", "2", "red"]), min_size=10, max_size=10),
       st.sampled_from(["yes", "no", "2", "red", "blue"]))
def test_metric_matches_string_count(annotations, answer):
    count = sum(1 for a in annotations if a == answer)
    assert vqa_accuracy(answer, annotations) == min(count / 3.0, 1.0)


def test_metric_needs_ten():
    with pytest.raises(ContractError):
        vqa_accuracy("a", ["a"] * 9)


def test_adam_first_step_unit_gradient():
    cfg = TrainConfig()
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    adam_step(p, {"w": np.ones(3)}, AdamState(), cfg)
    # m_hat = v_hat = 1 at t=1, so the step is lr / (sqrt(1) + eps)
    np.testing.assert_allclose(p["w"].data, -cfg.lr / (1.0 + cfg.adam_eps), rtol=0, atol=1e-12)


def test_adam_matches_reference_over_steps():
    cfg = TrainConfig(lr=0.01)
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    p = {"w": Tensor(w.copy(), requires_grad=True)}
    state = AdamState()
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, atol=1e-14)


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(ContractError):
        adam_step(p, {"w": np.ones(4)}, AdamState(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0)


def test_sample_targets_redraws_and_skips():
    vocab = Vocab.build(4)
    s_ok, _ = generate_split(2, seed=1)
    s_ok = s_ok[:1]
    s_ok[0].annotations = ["yes"] * 5 + ["maybe"] * 5
    bad, _ = generate_split(1, seed=2)
    bad[0].annotations = ["maybe"] * 10
    keep, targets = sample_targets(s_ok + bad, vocab, np.random.default_rng(0))
    assert keep == [0]
    assert targets.tolist() == [vocab.answer_ids["yes"]]


def test_sample_targets_uniform_over_annotations():
    vocab = Vocab.build(4)
    s, _ = generate_split(1, seed=1)
    s[0].annotations = ["yes"] * 7 + ["no"] * 3
    rng = np.random.default_rng(0)
    draws = [sample_targets(s, vocab, rng)[1][0] for _ in range(3000)]
    frac = np.mean(np.array(draws) == vocab.answer_ids["yes"])
    assert abs(frac - 0.7) < 3 * np.sqrt(0.21 / 3000)


def test_majority_oracle_reaches_ceiling():
    samples, _ = generate_split(500, seed=3, config=DataConfig(rho=0.3))
    report = score_predictions(samples, majority_answers(samples))
    assert report.overall >= consensus_ceiling(samples) - 1e-12


def test_evaluate_vocab_mismatch(tiny_data):
    _, val, vocab = tiny_data
    model = VQAModel(ModelConfig(vocab_size=len(vocab.tokens) + 1,
                                 num_answers=len(vocab.answers), **SMALL), "simple-conv")
    with pytest.raises(ConfigError):
        evaluate(model, val, vocab)


def test_report_categories(tiny_data):
    _, val, vocab = tiny_data
    model = VQAModel(model_config_for(vocab, TrainConfig(), **SMALL), "simple-conv")
    report = evaluate(model, val, vocab)
    assert set(report.per_category) <= {"yesno", "number", "other"}
    assert report.count == len(val)
    assert 0.0 <= report.overall <= 1.0
    assert "all=" in report.line()


def test_training_is_deterministic(tiny_data):
    train_s, _, vocab = tiny_data
    cfg = TrainConfig(iterations=6, batch_size=8, seed=3, eval_interval=0)
    traces = []
    for _ in range(2):
        model = VQAModel(model_config_for(vocab, cfg, **SMALL), "drau")
        traces.append(train(model, train_s, vocab, cfg).trace)
    assert traces[0] == traces[1]


def test_training_reduces_loss(tiny_data):
    train_s, _, vocab = tiny_data
    cfg = TrainConfig(iterations=150, batch_size=16, lr=3e-3, dropout=0.0, eval_interval=0)
    model = VQAModel(model_config_for(vocab, cfg, **SMALL), "simple-rvau")
    trace = train(model, train_s, vocab, cfg).trace
    losses = [loss for _, loss, _ in trace]
    assert np.mean(losses[-20:]) < 0.8 * np.mean(losses[:20])


def test_training_tracks_validation(tiny_data):
    train_s, val, vocab = tiny_data
    cfg = TrainConfig(iterations=4, batch_size=8, eval_interval=2)
    model = VQAModel(model_config_for(vocab, cfg, **SMALL), "simple-conv")
    result = train(model, train_s, vocab, cfg, val_samples=val)
    assert [step for step, _ in result.reports] == [2, 4]
    assert result.best_state is not None
    assert [v is not None for _, _, v in result.trace] == [False, True, False, True]


def test_divergence_detected(tiny_data):
    train_s, _, vocab = tiny_data
    cfg = TrainConfig(iterations=3, batch_size=8, eval_interval=0)
    model = VQAModel(model_config_for(vocab, cfg, **SMALL), "simple-conv")
    model.classifier.weight.data[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="classifier.weight"):
        train(model, train_s, vocab, cfg)


def test_empty_training_set(tiny_data):
    _, _, vocab = tiny_data
    model = VQAModel(model_config_for(vocab, TrainConfig(), **SMALL), "simple-conv")
    with pytest.raises(ContractError):
        train(model, [], vocab, TrainConfig())


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1.5, 2.5, 3.5])
    assert smoothed([1.0], window=5).tolist() == [1.0]


def test_untrained_model_near_chance(tiny_data):
    """A fresh model answers almost the same thing everywhere, so it cannot beat the
    best single constant answer by more than sampling noise."""
    _, _, vocab = tiny_data
    val, _ = generate_split(400, "val", seed=11, config=DataConfig(rho=0.0))
    model = VQAModel(model_config_for(vocab, TrainConfig(), **SMALL), "simple-rvau")
    acc = evaluate(model, val, vocab).overall
    best_constant = max(Counter(majority_answers(val)).values()) / len(val)
    sigma = np.sqrt(best_constant * (1 - best_constant) / len(val))
    assert acc <= best_constant + 3 * sigma
