"""Per-glimpse attention map export.

Visual maps become ASCII portable graymaps (P2) of the region grid, scaled
so the largest weight is 255; the scale is kept in a comment so the weights
can be read back. Textual maps are ``token<TAB>weight`` lines.
"""
from __future__ import annotations

import math
import os

import numpy as np

from .autograd import no_grad
from .errors import ParseError
from .models import predict_answer
from .train import make_batch, vqa_accuracy


def write_pgm(weights, side, path):
    w = np.asarray(weights, dtype=float).reshape(side, side)
    peak = float(w.max())
    pixels = np.zeros_like(w, dtype=int) if peak <= 0 else np.rint(w / peak * 255).astype(int)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n# max_weight {peak!r}\n{side} {side}\n255\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row) + "\n")
    return pixels


def read_pgm(path):
    """(pixels, weights) where weights undo the max-scaling."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != "P2":
        raise ParseError("not an ASCII graymap", 1)
    peak = None
    values = []
    for line in lines[1:]:
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "max_weight":
                peak = float(parts[1])
            continue
        values.extend(int(v) for v in line.split())
    width, height, maxval = values[:3]
    pixels = np.array(values[3:3 + width * height]).reshape(height, width)
    weights = pixels / maxval * (peak if peak is not None else 1.0)
    return pixels, weights


def write_token_weights(words, weights, path):
    with open(path, "w", encoding="utf-8") as fh:
        for word, w in zip(words, weights):
            fh.write(f"{word}\t{float(w)!r}\n")


def read_token_weights(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            word, sep, value = line.rstrip("\n").rpartition("\t")
            if not sep:
                raise ParseError("expected token<TAB>weight", lineno)
            out.append((word, float(value)))
    return out


def export_attention(model, sample, vocab, out_dir):
    """Write the attention maps, prediction and score for one sample.

    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    trace = {}
    with no_grad():
        logits, vis_map, txt_map = model(make_batch([sample]), trace=trace)
    if vis_map is None:
        vis_map = trace["visual_map"]
    answer = vocab.answers[int(predict_answer(logits)[0])]
    score = vqa_accuracy(answer, sample.annotations)
    side = math.isqrt(sample.features.shape[0])
    words = sample.question.split()
    written = []
    for g in range(vis_map.glimpses):
        path = os.path.join(out_dir, f"visual_glimpse{g}.pgm")
        write_pgm(vis_map.weights[0, g], side, path)
        written.append(path)
        if txt_map is not None:
            path = os.path.join(out_dir, f"textual_glimpse{g}.tsv")
            write_token_weights(words, txt_map.weights[0, g, :len(words)], path)
            written.append(path)
    path = os.path.join(out_dir, "prediction.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"question\t{sample.question}\n")
        fh.write(f"predicted\t{answer}\n")
        fh.write(f"score\t{score!r}\n")
        fh.write("annotations\t" + "|".join(sample.annotations) + "\n")
    written.append(path)
    return written
