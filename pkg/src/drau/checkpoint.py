"""Checkpoint files: a text manifest followed by raw float64 tensors.

Layout::

    DRAU-CHECKPOINT 1
    config {json}
    vocab {json}
    rng {json}
    optimizer_step 1200
    tensor <name> <d0,d1,...> <byte offset> <count>
    ...
    end
    <little-endian IEEE-754 float64 values, row-major, one tensor after another>

Names are prefixed ``param/``, ``adam.m/`` or ``adam.v/``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Vocab
from .errors import ConfigError, ParseError
from .models import ModelConfig, VQAModel
from .train import AdamState

MAGIC = "DRAU-CHECKPOINT"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict                     # name -> ndarray
    config: dict                      # {"model": ..., "train": ..., "variant": ...}
    vocab: dict | None = None         # {"tokens": [...], "answers": [...]}
    rng_state: dict | None = None
    optimizer_step: int = 0
    version: int = VERSION
    extra: dict = field(default_factory=dict)

    def params(self):
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}


def capture(model, vocab=None, optimizer=None, train_config=None, rng=None, params=None):
    """Snapshot a model (optionally with a substitute ``params`` dict)."""
    tensors = {}
    source = params or {n: p.data for n, p in model.named_parameters()}
    for name, value in source.items():
        tensors[f"param/{name}"] = np.array(value, dtype=np.float64)
    step = 0
    if optimizer is not None:
        step = optimizer.step
        for name in source:
            if name in optimizer.m:
                tensors[f"adam.m/{name}"] = optimizer.m[name].copy()
                tensors[f"adam.v/{name}"] = optimizer.v[name].copy()
    config = {"model": model.config.to_dict(), "variant": model.variant,
              "train": train_config.to_dict() if train_config is not None else None}
    return Checkpoint(
        tensors=tensors, config=config,
        vocab=None if vocab is None else {"tokens": vocab.tokens, "answers": vocab.answers},
        rng_state=None if rng is None else rng.bit_generator.state,
        optimizer_step=step)


def save(ckpt, path):
    names = list(ckpt.tensors)
    if len(set(names)) != len(names):
        raise ConfigError("duplicate tensor names")
    lines = [f"{MAGIC} {ckpt.version}",
             "config " + json.dumps(ckpt.config, sort_keys=True),
             "vocab " + json.dumps(ckpt.vocab),
             "rng " + json.dumps(ckpt.rng_state),
             f"optimizer_step {ckpt.optimizer_step}"]
    offset = 0
    blobs = []
    for name in names:
        if any(ch.isspace() for ch in name):
            raise ConfigError(f"tensor name {name!r} contains whitespace")
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {shape} {offset} {arr.size}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.find(b"\nend\n")
    if header_end < 0:
        raise ParseError("checkpoint manifest has no 'end' line")
    header = raw[:header_end].decode("utf-8").split("\n")
    body = raw[header_end + len(b"\nend\n"):]
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise ParseError("not a checkpoint file", 1)
    ckpt = Checkpoint(tensors={}, config={}, version=int(magic[1]))
    if ckpt.version != VERSION:
        raise ParseError(f"unsupported checkpoint version {ckpt.version}", 1)
    for lineno, line in enumerate(header[1:], 2):
        key, _, rest = line.partition(" ")
        if key == "config":
            ckpt.config = json.loads(rest)
        elif key == "vocab":
            ckpt.vocab = json.loads(rest)
        elif key == "rng":
            ckpt.rng_state = json.loads(rest)
        elif key == "optimizer_step":
            ckpt.optimizer_step = int(rest)
        elif key == "tensor":
            parts = rest.split(" ")
            if len(parts) != 4:
                raise ParseError(f"bad tensor entry {line!r}", lineno)
            name, shape, offset, count = parts
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            offset, count = int(offset), int(count)
            if offset + 8 * count > len(body):
                raise ParseError(f"tensor {name} runs past end of file", lineno)
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
            ckpt.tensors[name] = arr.astype(np.float64).reshape(dims)
        else:
            raise ParseError(f"unknown manifest key {key!r}", lineno)
    return ckpt


def restore_model(ckpt):
    model = VQAModel(ModelConfig(**ckpt.config["model"]), ckpt.config["variant"])
    stored = ckpt.params()
    own = dict(model.named_parameters())
    if set(stored) != set(own):
        missing = sorted(set(own) ^ set(stored))
        raise ConfigError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, p in own.items():
        if stored[name].shape != p.shape:
            raise ConfigError(f"shape mismatch for {name}: {stored[name].shape} vs {p.shape}")
        p.data[...] = stored[name]
    return model


def restore_optimizer(ckpt):
    state = AdamState(step=ckpt.optimizer_step)
    for key, value in ckpt.tensors.items():
        if key.startswith("adam.m/"):
            state.m[key[len("adam.m/"):]] = value.copy()
        elif key.startswith("adam.v/"):
            state.v[key[len("adam.v/"):]] = value.copy()
    return state


def restore_vocab(ckpt):
    if ckpt.vocab is None:
        return None
    return Vocab(ckpt.vocab["tokens"], ckpt.vocab["answers"])
