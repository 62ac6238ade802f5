"""Conv-vs-recurrent attention ablation: every variant trained under several seeds."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .models import VARIANTS, VQAModel
from .train import evaluate, model_config_for, train

log = logging.getLogger(__name__)

SIMPLE_PAIR = ("simple-conv", "simple-rvau")
DUAL_GRID = ("dca", "dca-rvau", "dca-rtau", "drau")
COLUMNS = (("All", None), ("Y/N", "yesno"), ("Num", "number"), ("Other", "other"))
HARD_KINDS = ("count", "relational")
PARAM_TOLERANCE = 0.02


@dataclass
class RunResult:
    variant: str
    seed: int
    params: int
    report: object = None
    error: str | None = None


@dataclass
class AblationRow:
    variant: str
    params: int
    runs: list = field(default_factory=list)

    @property
    def reports(self):
        return [r.report for r in self.runs if r.report is not None]

    @property
    def failures(self):
        return [r for r in self.runs if r.error is not None]

    def stat(self, category=None):
        vals = [rep.overall if category is None else rep.per_category.get(category, np.nan)
                for rep in self.reports]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))

    def hard_subset(self):
        return [rep.subset(HARD_KINDS) for rep in self.reports]


@dataclass
class AblationTable:
    rows: list

    def row(self, variant):
        return next(r for r in self.rows if r.variant == variant)

    def params_matched(self, variants, tolerance=PARAM_TOLERANCE):
        counts = [self.row(v).params for v in variants if any(r.variant == v for r in self.rows)]
        return (max(counts) - min(counts)) / min(counts) <= tolerance if counts else True

    def to_tsv(self):
        head = ["variant", "params", "seeds"] + [c for c, _ in COLUMNS] + ["Count+Rel", "failed"]
        lines = ["\t".join(head)]
        for r in self.rows:
            cells = [r.variant, str(r.params), str(len(r.reports))]
            for _, cat in COLUMNS:
                m, s = r.stat(cat)
                cells.append(f"{100 * m:.2f}±{100 * s:.2f}")
            hard = r.hard_subset()
            cells.append(f"{100 * np.mean(hard):.2f}±{100 * np.std(hard):.2f}" if hard else "nan")
            cells.append(str(len(r.failures)))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def recurrent_vs_conv(self):
        """Median count+relational accuracy, recurrent minus conv, per pairing."""
        out = {}
        for conv, rec in (("simple-conv", "simple-rvau"), ("dca", "dca-rvau"), ("dca", "drau")):
            if all(any(r.variant == v for r in self.rows) for v in (conv, rec)):
                a, b = self.row(rec).hard_subset(), self.row(conv).hard_subset()
                if a and b:
                    out[f"{rec} vs {conv}"] = float(np.median(a) - np.median(b))
        return out


def _run_one(args):
    variant, seed, train_samples, val_samples, vocab, cfg, overrides = args
    cfg = replace(cfg, seed=seed, variant=variant)
    model = VQAModel(model_config_for(vocab, cfg, **overrides), variant)
    params = model.num_parameters()
    try:
        train(model, train_samples, vocab, cfg)
        report = evaluate(model, val_samples, vocab, seed=seed)
        return RunResult(variant, seed, params, report)
    except Exception as exc:   # a diverged run is recorded, the others continue
        log.warning("run %s seed %d failed: %s", variant, seed, exc)
        return RunResult(variant, seed, params, error=f"{type(exc).__name__}: {exc}")


def run_ablation(train_samples, val_samples, vocab, cfg, seeds, variants=None,
                 jobs=1, model_overrides=None):
    if not seeds:
        raise ConfigError("need at least one seed")
    variants = list(variants or (SIMPLE_PAIR + DUAL_GRID))
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    overrides = dict(model_overrides or {})
    tasks = [(v, s, train_samples, val_samples, vocab, cfg, overrides)
             for v in variants for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    rows = []
    for v in variants:
        runs = [r for r in results if r.variant == v]
        rows.append(AblationRow(v, runs[0].params, runs))
    return AblationTable(rows)
