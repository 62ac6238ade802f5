import io
import json

import pytest

from drau import __version__
from drau.cli import DEFAULTS, main


def run(argv, environ=None):
    out = io.StringIO()
    code = main(argv, out=out, environ=environ or {})
    return code, out.getvalue()


def echoed_config(text):
    line = next(l for l in text.splitlines() if l.startswith("config "))
    return json.loads(line.split(" ", 2)[2])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    code, _ = run(["gen-data", "--out", str(d), "--scenes", "20", "--rho", "0"])
    assert code == 0
    return d


def test_echo_header(tmp_path):
    code, text = run(["gen-data", "--out", str(tmp_path), "--scenes", "2"])
    lines = text.splitlines()
    assert code == 0
    assert lines[0] == f"drau {__version__}"
    assert lines[1] == "seed 0"
    assert echoed_config(text)["scenes"] == 2


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        run(["gen-data", "--out", str(tmp_path / name), "--scenes", "10"])
    for f in ("train.jsonl", "val.jsonl", "vocab.txt", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data_zero_scenes(tmp_path):
    code, text = run(["gen-data", "--out", str(tmp_path), "--scenes", "0"])
    assert code == 0
    assert (tmp_path / "train.jsonl").read_text() == ""
    assert "train\t0" in text


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        run(["train", "--bogus", "1"])
    assert exc.value.code != 0


def test_bad_variant_choice():
    with pytest.raises(SystemExit):
        run(["train", "--variant", "triple"])


def test_precedence(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\nscenes = 7\nnoise=0.2  # trailing\nseed=4\n")
    code, text = run(["gen-data", "--out", str(tmp_path / "o"), "--config", str(conf),
                      "--scenes", "3"], environ={"DRAU_SEED": "9"})
    cfg = echoed_config(text)
    assert code == 0
    assert cfg["scenes"] == 3            # flag beats file
    assert cfg["noise"] == 0.2           # file beats default
    assert cfg["seed"] == 4              # file beats environment
    assert cfg["rho"] == DEFAULTS["gen-data"]["rho"]


def test_environment_seed(tmp_path):
    _, text = run(["gen-data", "--out", str(tmp_path), "--scenes", "1"], environ={"DRAU_SEED": "9"})
    assert echoed_config(text)["seed"] == 9


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("scenes=2\nflavour=mint\n")
    code, _ = run(["gen-data", "--out", str(tmp_path), "--config", str(conf)])
    assert code == 2


def test_bad_config_value(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("scenes=many\n")
    assert run(["gen-data", "--config", str(conf)])[0] == 2


def test_missing_data_dir(tmp_path):
    assert run(["train", "--data", str(tmp_path / "nowhere"), "--iters", "0"])[0] == 1


def test_train_zero_iters_writes_initial_checkpoint(data_dir, tmp_path):
    out = tmp_path / "run"
    code, text = run(["train", "--data", str(data_dir), "--out", str(out), "--iters", "0"])
    assert code == 0
    assert (out / "model.ckpt").exists()
    assert (out / "trace.tsv").read_text() == ""
    code, text = run(["eval", "--data", str(data_dir), "--checkpoint", str(out / "model.ckpt")])
    assert code == 0 and "all=" in text


def test_train_eval_attn(data_dir, tmp_path):
    out = tmp_path / "run"
    code, text = run(["train", "--data", str(data_dir), "--out", str(out), "--iters", "4",
                      "--batch", "4", "--eval-interval", "2", "--variant", "drau"])
    assert code == 0
    rows = [l.split("\t") for l in (out / "trace.tsv").read_text().splitlines()]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4]
    assert rows[0][2] == "" and rows[1][2] != ""
    code, text = run(["attn", "--data", str(data_dir), "--checkpoint", str(out / "model.ckpt"),
                      "--out", str(tmp_path / "maps")])
    assert code == 0
    assert (tmp_path / "maps" / "textual_glimpse1.tsv").exists()
    code, _ = run(["attn", "--data", str(data_dir), "--checkpoint", str(out / "model.ckpt"),
                   "--index", "100000"])
    assert code == 2


def test_ablate_small(data_dir, tmp_path):
    code, text = run(["ablate", "--data", str(data_dir), "--out", str(tmp_path / "t.tsv"),
                      "--variants", "simple-conv,simple-rvau", "--seeds", "1", "--iters", "2",
                      "--batch", "4"])
    assert code == 0
    assert (tmp_path / "t.tsv").read_text().startswith("variant\tparams")
    assert "median gap simple-rvau vs simple-conv" in text


def test_ablate_unknown_variant(data_dir):
    code, _ = run(["ablate", "--data", str(data_dir), "--variants", "dca,nope"])
    assert code == 2


def test_gradcheck_passes():
    code, text = run(["gradcheck", "--seeds", "1", "--coords", "2"])
    assert code == 0
    assert "FAIL" not in text
