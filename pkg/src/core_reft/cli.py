"""Command-line front end: ``core-reft pretrain|run|sweep|verify``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ExperimentConfig
from .errors import ConfigError
from .experiment import (
    build_data,
    format_per_task,
    format_results,
    obtain_encoder,
    pretrain_encoder,
    run_experiment,
    scaled_layer_counts,
    spread_layers,
    summarize,
)
from .nn import save_encoder
from .verify import format_report, run_all

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3

SWEEP_GRIDS = {
    "rank": [4, 8, 16, 32, 64],
    "layers": [1, 3, 6, 9, 12],
    "alpha": [1.0, 0.5, 0.1, 0.05, 0.01],
    "seed": [1991, 1992, 1993, 1994, 1995],
}


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    """Pretrain the encoder; writes ``encoder.bin`` and ``pretrain.json``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    base, _ = build_data(cfg)
    if base is None:
        raise ConfigError("pretraining needs data.base_manifest or synthetic data")
    enc, summary = pretrain_encoder(cfg, base)
    path = out / "encoder.bin"
    path.write_bytes(save_encoder(enc))
    _write_json(out / "pretrain.json", summary)
    return path


def cmd_run(cfg: ExperimentConfig, encoder=None, data=None) -> Path:
    """Run every ``(alpha, seed)`` pair.

    Writes ``results.csv``, ``per_task.csv`` (accuracy on each seen task per
    stage), ``summary.json`` and the effective ``config.toml``.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    base, down = data if data is not None else build_data(cfg)
    enc = encoder if encoder is not None else obtain_encoder(cfg, base)
    rows = run_experiment(cfg, enc, down)
    (out / "results.csv").write_text(format_results(rows), encoding="utf-8", newline="")
    (out / "per_task.csv").write_text(format_per_task(rows), encoding="utf-8", newline="")
    _write_json(out / "summary.json", summarize(cfg, rows))
    (out / "config.toml").write_text(cfg.dumps(), encoding="utf-8")
    return out / "results.csv"


def sweep_cell(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with ``axis`` set to ``value`` and its own output directory."""
    cell = copy.deepcopy(cfg)
    if axis == "rank":
        cell.intervention.rank = int(value)
    elif axis == "layers":
        cell.intervention.layers = spread_layers(int(value), cfg.encoder.depth)
    elif axis == "alpha":
        cell.alphas = [float(value)]
    elif axis == "seed":
        cell.seeds = [int(value)]
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    cell.out = str(Path(cfg.out) / "cells" / f"{axis}-{value}")
    return cell


def _run_cell(cell: ExperimentConfig) -> dict:
    try:
        cell.validate()
        cmd_run(cell)
        return {"status": "ok"}
    except Exception as exc:  # a failing cell must not stop the sweep
        return {"status": "error", "error": f"{type(exc).__name__}: {exc}"}


def default_sweep_values(cfg: ExperimentConfig, axis: str) -> list:
    if axis == "layers":
        return scaled_layer_counts(SWEEP_GRIDS["layers"], cfg.encoder.depth)
    return list(SWEEP_GRIDS[axis])


def cmd_sweep(cfg: ExperimentConfig, axis: str, values=None) -> dict:
    """Run one cell per axis value and merge the rows into ``results.csv``.

    Cells run in up to ``CORE_REFT_THREADS`` worker processes.  A failing cell
    is recorded in ``sweep.json`` and the rest continue.
    """
    if axis not in SWEEP_GRIDS:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_GRIDS)}, got {axis!r}")
    values = list(values) if values else default_sweep_values(cfg, axis)
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.encoder.checkpoint:
        # pretrain once so every cell shares the same backbone
        cfg = copy.deepcopy(cfg)
        cfg.encoder.checkpoint = str(cmd_pretrain(cfg))
    cells = [sweep_cell(cfg, axis, v) for v in values]
    workers = max(1, min(len(cells), int(os.environ.get("CORE_REFT_THREADS", os.cpu_count() or 1))))
    if workers == 1:
        statuses = [_run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(_run_cell, cells))

    merged_header, merged = None, []
    for value, cell, status in zip(values, cells, statuses):
        status.update({"axis": axis, "value": value, "out": cell.out})
        if status["status"] == "ok":
            lines = (Path(cell.out) / "results.csv").read_text(encoding="utf-8").splitlines(keepends=True)
            merged_header = lines[0]
            merged.extend(lines[1:])
    if merged_header is not None:
        (out / "results.csv").write_text(merged_header + "".join(merged), encoding="utf-8", newline="")
    report = {"axis": axis, "values": values, "cells": statuses}
    _write_json(out / "sweep.json", report)
    return report


def cmd_verify(out=".", fault=False, seed=0, draws=1000) -> bool:
    results = run_all(seed=seed, draws=draws, fault=fault)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(results), encoding="utf-8")
    return all(r.passed for r in results)


# ---------------------------------------------------------------- argument handling


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="core-reft", description="Low-rank representation editing for continual learning.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "run", "sweep", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment config (defaults apply when omitted)")
        p.add_argument("--out", help="output directory")
        if name == "verify":
            p.add_argument("--inject-fault", action="store_true", help="perturb one analytic gradient")
            p.add_argument("--seed", type=int, default=0)
            continue
        p.add_argument("--seed", type=int, help="single run seed")
        p.add_argument("--rank", type=int)
        p.add_argument("--layers", help="comma-separated block indices, e.g. 0,2,3")
        p.add_argument("--alpha", type=float, help="single imbalance factor")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=sorted(SWEEP_GRIDS))
            p.add_argument("--values", help="comma-separated axis values (default grid otherwise)")
    return ap


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "rank", None) is not None:
        cfg.intervention.rank = args.rank
    if getattr(args, "layers", None):
        try:
            cfg.intervention.layers = [int(v) for v in args.layers.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--layers: {exc}") from exc
    if getattr(args, "alpha", None) is not None:
        cfg.alphas = [args.alpha]
    return cfg.validate()


def _parse_values(axis, text):
    if not text:
        return None
    cast = float if axis == "alpha" else int
    try:
        return [cast(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify":
            out = args.out or "."
            ok = cmd_verify(out, fault=args.inject_fault, seed=args.seed)
            print(Path(out, "report.txt").read_text(encoding="utf-8"), end="")
            return EXIT_OK if ok else EXIT_VERIFY
        cfg = load_config(args)
        if args.command == "pretrain":
            print(cmd_pretrain(cfg))
        elif args.command == "run":
            print(cmd_run(cfg))
        else:
            report = cmd_sweep(cfg, args.axis, _parse_values(args.axis, args.values))
            failed = [c for c in report["cells"] if c["status"] != "ok"]
            for c in failed:
                print(f"cell {c['axis']}={c['value']} failed: {c['error']}", file=sys.stderr)
            return EXIT_RUNTIME if failed else EXIT_OK
        return EXIT_OK
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        if os.environ.get("CORE_REFT_DEBUG"):
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
