"""Turn an :class:`ExperimentConfig` into datasets, an encoder and result rows."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .continual import PrototypeClassifier, class_means, run_scenario
from .data import (
    Dataset,
    ImbalanceSpec,
    imbalance_stream,
    load_manifest,
    make_synthetic_cil,
    make_synthetic_dil,
    split_domains,
    split_tasks,
)
from .errors import ConfigError, CoreReftError
from .nn import FrozenEncoder, encode, load_encoder, pretrain
from .reft import InterventionConfig

RESULT_COLUMNS = ("run_id", "seed", "scenario", "rank", "layers", "alpha", "stage", "last", "avg", "params", "wall_time_s")
PER_TASK_COLUMNS = ("run_id", "stage", "task", "accuracy")


@dataclass
class ResultRow:
    run_id: str
    seed: int
    scenario: str
    rank: int
    layers: tuple
    alpha: float
    stage: int
    last: float
    avg: float
    params: int
    wall_time_s: float
    # accuracy on each seen task's test split at this stage; not a results.csv column
    per_task: tuple = ()

    def cells(self) -> list[str]:
        return [
            self.run_id,
            str(self.seed),
            self.scenario,
            str(self.rank),
            ",".join(str(v) for v in self.layers),
            repr(float(self.alpha)),
            str(self.stage),
            repr(float(self.last)),
            repr(float(self.avg)),
            str(self.params),
            repr(float(self.wall_time_s)),
        ]


def spread_layers(count: int, depth: int) -> list[int]:
    """``count`` evenly spaced block indices of a ``depth``-block encoder, ending at the last block."""
    if not 1 <= count <= depth:
        raise ConfigError(f"layer count {count} must lie in [1, {depth}]")
    return [(j + 1) * depth // count - 1 for j in range(count)]


def scaled_layer_counts(counts, depth: int, reference_depth: int = 12) -> list[int]:
    """Rescale layer counts defined for a ``reference_depth`` encoder; duplicates are dropped."""
    out = []
    for c in counts:
        k = min(depth, max(1, math.floor(c * depth / reference_depth + 0.5)))
        if k not in out:
            out.append(k)
    return out


# ---------------------------------------------------------------- inputs


def build_data(cfg: ExperimentConfig) -> tuple[Dataset | None, Dataset]:
    """``(base, downstream)``; ``base`` is ``None`` when a manifest run needs none."""
    d = cfg.data
    if d.source == "manifest":
        base = load_manifest(d.base_manifest) if d.base_manifest else None
        return base, load_manifest(d.manifest)
    base, down = make_synthetic_cil(
        d.n_classes, d.dim, d.per_class, d.gap_strength, d.seed,
        base_classes=d.base_classes, base_per_class=d.base_per_class, tokens=d.tokens,
    )
    if cfg.scenario == "DIL":
        down = make_synthetic_dil(d.n_domains, d.n_classes, d.per_class, d.seed, dim=d.dim)
    return base, down


def pretrain_encoder(cfg: ExperimentConfig, base: Dataset) -> tuple[FrozenEncoder, dict]:
    """Pretrain on a stratified split of ``base`` and score the held-out part.

    The score is nearest-class-mean accuracy on frozen features, so it needs
    no trained head.
    """
    split = split_tasks(base, base.num_classes, seed=cfg.pretrain.seed, test_frac=cfg.data.test_frac).tasks[0]
    history = []
    started = time.perf_counter()
    enc = pretrain(cfg.encoder.encoder_config(), split.train, cfg.pretrain, history)
    elapsed = time.perf_counter() - started
    clf = PrototypeClassifier(cfg.similarity)
    for cls, mean in class_means(encode(enc, split.train.inputs), split.train.labels).items():
        clf.set(cls, mean)
    hits = int(np.sum(clf.predict(encode(enc, split.test.inputs)) == split.test.labels))
    summary = {
        "base_classes": base.num_classes,
        "train_samples": len(split.train),
        "val_samples": len(split.test),
        "val_accuracy": 100.0 * hits / len(split.test),
        "chance": 100.0 / base.num_classes,
        "loss_first_epoch": history[0],
        "loss_last_epoch": history[-1],
        "encoder_params": enc.num_params(),
        "checksum": enc.checksum(),
        "wall_time_s": elapsed,
    }
    return enc, summary


def obtain_encoder(cfg: ExperimentConfig, base: Dataset | None) -> FrozenEncoder:
    if cfg.encoder.checkpoint:
        enc = load_encoder(Path(cfg.encoder.checkpoint).read_bytes())
        if enc.config.to_dict() != cfg.encoder.encoder_config().to_dict():
            raise ConfigError("encoder checkpoint does not match the [encoder] table")
        return enc
    if base is None:
        raise ConfigError("no encoder checkpoint and no pretraining data")
    return pretrain_encoder(cfg, base)[0]


def build_stream(cfg: ExperimentConfig, down: Dataset, seed: int, alpha: float):
    d = cfg.data
    if cfg.scenario == "DIL":
        stream = split_domains(down, seed=seed, test_frac=d.test_frac)
    else:
        stream = split_tasks(down, d.inc, seed=seed, test_frac=d.test_frac, scenario=cfg.scenario)
    if alpha < 1.0:
        pooled = Dataset.concat([t.train for t in stream.tasks])
        counts = np.bincount(pooled.labels, minlength=pooled.num_classes)
        stream = imbalance_stream(stream, ImbalanceSpec(alpha, int(counts[counts > 0].min())), seed)
    return stream


# ---------------------------------------------------------------- runs


def run_id(cfg: ExperimentConfig, seed: int, alpha: float) -> str:
    iv = cfg.intervention
    arch = f"r{iv.rank}-l{'.'.join(map(str, iv.layers))}-{iv.positions}" if cfg.method == "core" else "base"
    return f"{cfg.method}-{cfg.scenario}-{arch}-a{alpha!r}-s{seed}"


def run_experiment(cfg: ExperimentConfig, encoder: FrozenEncoder, down: Dataset) -> list[ResultRow]:
    """One run per ``(alpha, seed)``; one row per stage."""
    rows = []
    for alpha in cfg.alphas:
        for seed in cfg.seeds:
            started = time.perf_counter()
            stream = build_stream(cfg, down, seed, alpha)
            icfg = InterventionConfig(
                list(cfg.intervention.layers), cfg.intervention.rank, cfg.intervention.positions,
                cfg.intervention.lambda_orth, init_seed=seed,
            )
            hyper = type(cfg.hyper)(**{**cfg.hyper.__dict__, "seed": seed})
            result = run_scenario(encoder, icfg, stream, hyper, cfg.method, cfg.similarity, cfg.k_centers)
            wall = time.perf_counter() - started
            core = cfg.method == "core"
            m = result.metrics
            for t, (last, avg, per_task) in enumerate(zip(m.last, m.avg, m.per_task), start=1):
                rows.append(ResultRow(
                    run_id(cfg, seed, alpha), seed, cfg.scenario,
                    icfg.rank if core else 0, tuple(icfg.layers) if core else (),
                    alpha, t, last, avg, result.trainable_params, wall, tuple(per_task),
                ))
    return rows


def check_rows(rows: list[ResultRow]):
    """Re-derive every ``avg`` from the ``last`` column of its run."""
    lasts: dict = {}
    for row in rows:
        seq = lasts.setdefault(row.run_id, [])
        seq.append(row.last)
        if row.stage != len(seq) or row.avg != sum(seq) / len(seq):
            raise CoreReftError(f"inconsistent avg in run {row.run_id} at stage {row.stage}")


def format_results(rows: list[ResultRow]) -> str:
    check_rows(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()


def format_per_task(rows: list[ResultRow]) -> str:
    """Long-format per-task accuracy matrix: one line per (run, stage, seen task)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(PER_TASK_COLUMNS)
    for row in rows:
        for task, acc in enumerate(row.per_task, start=1):
            writer.writerow([row.run_id, row.stage, task, repr(float(acc))])
    return buf.getvalue()


def read_results(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text, newline="")))


def summarize(cfg: ExperimentConfig, rows: list[ResultRow]) -> dict:
    """Final-stage Avg/Last per run plus mean and sample stddev across seeds per alpha."""
    finals = {}
    for row in rows:
        finals[row.run_id] = row
    runs = [
        {"run_id": r.run_id, "seed": r.seed, "alpha": r.alpha, "rank": r.rank, "layers": list(r.layers),
         "avg": r.avg, "last": r.last, "params": r.params}
        for r in finals.values()
    ]
    groups = []
    for alpha in cfg.alphas:
        sel = [r for r in runs if r["alpha"] == alpha]
        if not sel:
            continue
        avgs = [r["avg"] for r in sel]
        lasts = [r["last"] for r in sel]
        groups.append({
            "alpha": alpha,
            "seeds": [r["seed"] for r in sel],
            "avg_mean": statistics.fmean(avgs),
            "avg_std": statistics.stdev(avgs) if len(avgs) > 1 else 0.0,
            "last_mean": statistics.fmean(lasts),
            "last_std": statistics.stdev(lasts) if len(lasts) > 1 else 0.0,
        })
    return {"scenario": cfg.scenario, "method": cfg.method, "runs": runs, "aggregate": groups}
