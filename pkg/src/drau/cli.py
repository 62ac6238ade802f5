"""Command-line entry point: ``drau <subcommand> [flags]``.

Effective settings come from three layers: built-in defaults, then an
optional ``--config`` file of ``key=value`` lines, then explicit flags.
The default seed can also be set through ``DRAU_SEED``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, ParseError

SEED_ENV = "DRAU_SEED"
VARIANT_NAMES = ("drau", "dca", "dca-rvau", "dca-rtau", "simple-conv", "simple-rvau")

# subcommand -> {key: default}; keys double as flag names (underscores -> dashes)
DEFAULTS = {
    "gen-data": {"out": "data", "scenes": 1000, "seed": 0, "side": 4, "region_dim": 20,
                 "occupancy": 0.2, "noise": 0.05, "rho": 0.1, "questions_per_scene": 6},
    "train": {"data": "data", "out": "run", "variant": "simple-rvau", "iters": 5000,
              "batch": 32, "lr": 7e-4, "dropout": 0.3, "seed": 0, "eval_interval": 500},
    "eval": {"data": "data", "checkpoint": "run/model.ckpt", "split": "val", "seed": 0},
    "ablate": {"data": "data", "out": "ablation.tsv", "variants": ",".join(
        ("simple-conv", "simple-rvau", "dca", "dca-rvau", "dca-rtau", "drau")),
        "seeds": 3, "iters": 5000, "batch": 32, "lr": 7e-4, "dropout": 0.3, "seed": 0,
        "jobs": 1},
    "attn": {"data": "data", "checkpoint": "run/model.ckpt", "split": "val", "index": 0,
             "out": "attn", "seed": 0},
    "gradcheck": {"seeds": 10, "coords": 4, "seed": 0},
}
HELP = {
    "gen-data": "write train/val splits and the vocabulary",
    "train": "train one variant and write a checkpoint and a loss trace",
    "eval": "score a checkpoint on a dataset split",
    "ablate": "train every variant under several seeds and tabulate mean and std",
    "attn": "export per-glimpse attention maps for one sample",
    "gradcheck": "run the finite-difference gradient suite",
}


def _coerce(key, value, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None


def read_config_file(path, known):
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ParseError(f"expected key=value, got {line!r}", lineno)
            if key not in known:
                raise ParseError(f"unknown key {key!r}", lineno)
            out[key] = _coerce(key, value.strip(), known[key])
    return out


def effective_config(command, args, environ=None):
    """defaults < environment seed < config file < flags."""
    environ = os.environ if environ is None else environ
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if SEED_ENV in environ and "seed" in cfg:
        cfg["seed"] = _coerce("seed", environ[SEED_ENV], 0)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config, defaults))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="drau", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"drau {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, defaults in DEFAULTS.items():
        p = sub.add_parser(command, help=HELP[command])
        p.add_argument("--config", help="key=value file applied under the flags")
        for key, default in defaults.items():
            kwargs = {"default": None, "help": f"default {default}"}
            if key == "variant":
                kwargs["choices"] = VARIANT_NAMES
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=type(default), **kwargs)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _echo(command, cfg, out):
    print(f"drau {__version__}", file=out)
    print(f"seed {cfg.get('seed')}", file=out)
    print(f"config {command} " + json.dumps(cfg, sort_keys=True), file=out)


def _data_config(cfg):
    from .data import DataConfig
    return DataConfig(side=cfg["side"], region_dim=cfg["region_dim"],
                      occupancy=cfg["occupancy"], noise=cfg["noise"], rho=cfg["rho"],
                      questions_per_scene=cfg["questions_per_scene"])


def _load_split(data_dir, split):
    from .data import Vocab, read_dataset
    vocab = Vocab.read(os.path.join(data_dir, "vocab.txt"))
    meta_path = os.path.join(data_dir, "meta.json")
    region_dim = 20
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            region_dim = json.load(fh)["region_dim"]
    return read_dataset(os.path.join(data_dir, f"{split}.jsonl"), region_dim), vocab, region_dim


def _train_config(cfg, variant=None):
    from .train import TrainConfig
    return TrainConfig(lr=cfg["lr"], batch_size=cfg["batch"], iterations=cfg["iters"],
                       dropout=cfg["dropout"], seed=cfg["seed"],
                       eval_interval=cfg.get("eval_interval", 0),
                       variant=variant or cfg.get("variant", "simple-rvau"))


def _model_overrides(samples, region_dim):
    if samples:
        return {"num_regions": samples[0].features.shape[0], "region_dim": region_dim}
    return {"region_dim": region_dim}


def cmd_gen_data(cfg, out):
    from .data import category_counts, generate_dataset, write_dataset
    dc = _data_config(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    train, val, vocab = generate_dataset(cfg["scenes"], cfg["seed"], dc)
    write_dataset(train, os.path.join(cfg["out"], "train.jsonl"))
    write_dataset(val, os.path.join(cfg["out"], "val.jsonl"))
    vocab.write(os.path.join(cfg["out"], "vocab.txt"))
    with open(os.path.join(cfg["out"], "meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"region_dim": dc.region_dim, "side": dc.side}, fh, sort_keys=True)
        fh.write("\n")
    for name, split in (("train", train), ("val", val)):
        counts = category_counts(split)
        print(f"{name}\t{len(split)}\t" + "\t".join(f"{k}={v}" for k, v in counts.items()),
              file=out)
    return 0


def cmd_train(cfg, out):
    from . import checkpoint
    from .models import VQAModel
    from .train import model_config_for, train
    samples, vocab, region_dim = _load_split(cfg["data"], "train")
    val_path = os.path.join(cfg["data"], "val.jsonl")
    val = _load_split(cfg["data"], "val")[0] if os.path.exists(val_path) else None
    tc = _train_config(cfg)
    model = VQAModel(model_config_for(vocab, tc, **_model_overrides(samples, region_dim)),
                     tc.variant)
    print(f"parameters {model.num_parameters()}", file=out)
    os.makedirs(cfg["out"], exist_ok=True)
    if tc.iterations and samples:
        result = train(model, samples, vocab, tc, val_samples=val)
        trace, opt, rng = result.trace, result.optimizer, result.rng
    else:
        trace, opt, rng = [], None, np.random.default_rng([tc.seed, 99])
    with open(os.path.join(cfg["out"], "trace.tsv"), "w", encoding="utf-8") as fh:
        for step, loss, val_acc in trace:
            fh.write(f"{step}\t{loss!r}\t{'' if val_acc is None else repr(val_acc)}\n")
    ckpt = checkpoint.capture(model, vocab, opt, tc, rng)
    path = os.path.join(cfg["out"], "model.ckpt")
    checkpoint.save(ckpt, path)
    if trace:
        print(f"final_loss {trace[-1][1]:.6f}", file=out)
    print(f"checkpoint {path}", file=out)
    return 0


def cmd_eval(cfg, out):
    from . import checkpoint
    from .train import evaluate
    ckpt = checkpoint.load(cfg["checkpoint"])
    model = checkpoint.restore_model(ckpt)
    samples, vocab, _ = _load_split(cfg["data"], cfg["split"])
    report = evaluate(model, samples, vocab, seed=cfg["seed"])
    print(report.line(), file=out)
    for kind, acc in sorted(report.per_kind.items()):
        print(f"kind {kind}={acc:.4f} n={report.kind_counts[kind]}", file=out)
    return 0


def cmd_ablate(cfg, out):
    from .ablation import run_ablation
    train_s, vocab, region_dim = _load_split(cfg["data"], "train")
    val_s = _load_split(cfg["data"], "val")[0]
    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    for v in variants:
        if v not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {v!r}")
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    table = run_ablation(train_s, val_s, vocab, _train_config(cfg), seeds, variants,
                         jobs=cfg["jobs"], model_overrides=_model_overrides(train_s, region_dim))
    text = table.to_tsv()
    out.write(text)
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        fh.write(text)
    for pair, gap in table.recurrent_vs_conv().items():
        print(f"count+relational median gap {pair}: {100 * gap:+.2f}", file=out)
    failed = sum(len(r.failures) for r in table.rows)
    return 1 if failed else 0


def cmd_attn(cfg, out):
    from . import checkpoint
    from .export import export_attention
    model = checkpoint.restore_model(checkpoint.load(cfg["checkpoint"]))
    samples, vocab, _ = _load_split(cfg["data"], cfg["split"])
    if not 0 <= cfg["index"] < len(samples):
        raise ConfigError(f"index {cfg['index']} outside [0, {len(samples)})")
    for path in export_attention(model, samples[cfg["index"]], vocab, cfg["out"]):
        print(path, file=out)
    return 0


def cmd_gradcheck(cfg, out):
    from .gradsuite import TOLERANCE, run_model_suite, run_op_suite
    seeds = range(cfg["seed"], cfg["seed"] + cfg["seeds"])
    result = run_op_suite(seeds)
    run_model_suite(seeds, max_coords=cfg["coords"], result=result)
    for name, err in result.worst.items():
        print(f"{name}\t{err:.3e}\t{'ok' if err < TOLERANCE else 'FAIL'}", file=out)
    print("stats " + json.dumps(result.stats, sort_keys=True), file=out)
    return 1 if result.failures() else 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "attn": cmd_attn, "gradcheck": cmd_gradcheck}


def main(argv=None, out=None, environ=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args.command, args, environ)
        _echo(args.command, cfg, out)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
