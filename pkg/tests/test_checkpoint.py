import numpy as np
import pytest

from drau import checkpoint as ckpt_io
from drau.data import DataConfig, generate_split
from drau.errors import ConfigError, ParseError
from drau.models import VQAModel
from drau.train import AdamState, TrainConfig, evaluate, model_config_for, train

SMALL = dict(embed_dim=8, frozen_dim=8, question_hidden=12, joint_dim=12, summary_dim=12,
             attention_channels=12, attention_output=12, sketch_dim=64)


@pytest.fixture(scope="module")
def trained():
    samples, vocab = generate_split(80, seed=2, config=DataConfig(rho=0.0))
    cfg = TrainConfig(iterations=5, batch_size=8, eval_interval=0)
    model = VQAModel(model_config_for(vocab, cfg, **SMALL), "drau")
    result = train(model, samples, vocab, cfg)
    return model, vocab, samples, cfg, result


def test_round_trip_bitwise(trained, tmp_path):
    model, vocab, samples, cfg, result = trained
    path = tmp_path / "m.ckpt"
    ckpt_io.save(ckpt_io.capture(model, vocab, result.optimizer, cfg), path)
    back = ckpt_io.load(path)
    restored = ckpt_io.restore_model(back)
    for (name, p), (name2, q) in zip(model.named_parameters(), restored.named_parameters()):
        assert name == name2
        assert p.data.tobytes() == q.data.tobytes()
    assert ckpt_io.restore_vocab(back) == vocab
    state = ckpt_io.restore_optimizer(back)
    assert state.step == result.optimizer.step == 5
    for name, m in result.optimizer.m.items():
        assert state.m[name].tobytes() == m.tobytes()
    assert evaluate(restored, samples, vocab) == evaluate(model, samples, vocab)


def test_save_is_byte_stable(trained, tmp_path):
    model, vocab, *_ = trained
    for name in ("a", "b"):
        ckpt_io.save(ckpt_io.capture(model, vocab), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_rng_state_round_trip(trained, tmp_path):
    model, *_ = trained
    rng = np.random.default_rng(4)
    rng.normal(size=3)
    ckpt_io.save(ckpt_io.capture(model, rng=rng), tmp_path / "r")
    state = ckpt_io.load(tmp_path / "r").rng_state
    clone = np.random.default_rng()
    clone.bit_generator.state = state
    assert clone.normal() == rng.normal()


def test_missing_end_line(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"DRAU-CHECKPOINT 1\nconfig {}\n")
    with pytest.raises(ParseError, match="end"):
        ckpt_io.load(p)


def test_wrong_magic_and_version(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"SOMETHING 1\nend\n")
    with pytest.raises(ParseError, match="not a checkpoint"):
        ckpt_io.load(p)
    p.write_bytes(b"DRAU-CHECKPOINT 9\nend\n")
    with pytest.raises(ParseError, match="version"):
        ckpt_io.load(p)


def test_truncated_body(trained, tmp_path):
    model, *_ = trained
    p = tmp_path / "t"
    ckpt_io.save(ckpt_io.capture(model), p)
    p.write_bytes(p.read_bytes()[:-16])
    with pytest.raises(ParseError, match="past end"):
        ckpt_io.load(p)


def test_unknown_key_reports_line(tmp_path):
    p = tmp_path / "u"
    p.write_bytes(b"DRAU-CHECKPOINT 1\nconfig {}\nmystery 3\nend\n")
    with pytest.raises(ParseError, match="line 3"):
        ckpt_io.load(p)


def test_restore_rejects_foreign_parameters(trained):
    model, *_ = trained
    ck = ckpt_io.capture(model)
    ck.tensors.pop(next(iter(ck.tensors)))
    with pytest.raises(ConfigError):
        ckpt_io.restore_model(ck)


def test_whitespace_names_rejected(trained, tmp_path):
    model, *_ = trained
    ck = ckpt_io.capture(model)
    ck.tensors["param/bad name"] = np.zeros(1)
    with pytest.raises(ConfigError):
        ckpt_io.save(ck, tmp_path / "w")


def test_empty_optimizer_state():
    assert ckpt_io.restore_optimizer(ckpt_io.Checkpoint({}, {})) == AdamState()
