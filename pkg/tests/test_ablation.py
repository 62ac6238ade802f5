import numpy as np
import pytest

from drau import ablation
from drau.ablation import AblationRow, RunResult, run_ablation
from drau.data import DataConfig, generate_split
from drau.errors import ConfigError
from drau.train import EvalReport, TrainConfig

SMALL = dict(embed_dim=8, frozen_dim=8, question_hidden=12, joint_dim=12, summary_dim=12,
             attention_channels=12, attention_output=12, sketch_dim=64)


@pytest.fixture(scope="module")
def data():
    train_s, vocab = generate_split(60, "train", seed=1, config=DataConfig(rho=0.0))
    val_s, _ = generate_split(40, "val", seed=1, config=DataConfig(rho=0.0))
    return train_s, val_s, vocab


CFG = TrainConfig(iterations=3, batch_size=8, eval_interval=0)


def test_tiny_ablation_table(data):
    table = run_ablation(*data, CFG, seeds=[0, 1], variants=["simple-conv", "simple-rvau"],
                         model_overrides=SMALL)
    lines = table.to_tsv().splitlines()
    assert lines[0].split("\t") == ["variant", "params", "seeds", "All", "Y/N", "Num", "Other",
                                    "Count+Rel", "failed"]
    assert [line.split("\t")[0] for line in lines[1:]] == ["simple-conv", "simple-rvau"]
    assert all(line.split("\t")[2] == "2" for line in lines[1:])
    assert table.params_matched(["simple-conv", "simple-rvau"])
    assert set(table.recurrent_vs_conv()) == {"simple-rvau vs simple-conv"}


def test_single_seed_has_zero_std(data):
    table = run_ablation(*data, CFG, seeds=[0], variants=["simple-conv"], model_overrides=SMALL)
    mean, std = table.row("simple-conv").stat()
    assert std == 0.0 and 0.0 <= mean <= 1.0


def test_failed_run_is_recorded(data, monkeypatch):
    real = ablation.train

    def flaky(model, samples, vocab, cfg, **kw):
        if cfg.seed == 1:
            raise FloatingPointError("boom")
        return real(model, samples, vocab, cfg, **kw)

    monkeypatch.setattr(ablation, "train", flaky)
    table = run_ablation(*data, CFG, seeds=[0, 1], variants=["simple-rvau"],
                         model_overrides=SMALL)
    row = table.row("simple-rvau")
    assert len(row.reports) == 1
    assert [f.seed for f in row.failures] == [1]
    assert "boom" in row.failures[0].error
    assert table.to_tsv().splitlines()[1].endswith("\t1")


def test_stat_matches_numpy():
    reports = [EvalReport(overall=v, per_category={"yesno": v / 2}, per_kind={}, count=1)
               for v in (0.5, 0.7, 0.9)]
    row = AblationRow("x", 10, [RunResult("x", i, 10, r) for i, r in enumerate(reports)])
    assert row.stat() == pytest.approx((0.7, np.std([0.5, 0.7, 0.9])))
    assert row.stat("yesno")[0] == pytest.approx(0.35)


def test_bad_arguments(data):
    with pytest.raises(ConfigError):
        run_ablation(*data, CFG, seeds=[])
    with pytest.raises(ConfigError):
        run_ablation(*data, CFG, seeds=[0], variants=["nope"])
