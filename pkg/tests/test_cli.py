import csv
import io
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core_reft.cli import main
from core_reft.config import ExperimentConfig
from core_reft.errors import ConfigError

SMALL = """
seeds = [1993]
[data]
n_classes = 6
dim = 12
per_class = 20
base_classes = 4
base_per_class = 12
tokens = 4
inc = 2
[encoder]
depth = 2
dim = 16
heads = 2
num_patches = 4
token_dim = 3
[pretrain]
epochs = 2
batch = 16
[intervention]
layers = [0, 1]
rank = 2
[hyper]
epochs = 2
batch = 16
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text(), newline="")))


def _strip_wall(text):
    return [r[:-1] for r in csv.reader(io.StringIO(text, newline=""))]


# ---- configuration


def test_config_round_trip_defaults():
    cfg = ExperimentConfig()
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["CIL", "TIL", "DIL"]),
    st.lists(st.integers(0, 10_000), min_size=1, max_size=4),
    st.lists(st.sampled_from([1.0, 0.5, 0.1, 0.01]), min_size=1, max_size=3),
    st.integers(1, 8),
    st.floats(0.0, 5.0, allow_nan=False),
    st.floats(1e-4, 1.0, allow_nan=False),
)
def test_config_round_trip_property(scenario, seeds, alphas, rank, gap, lr):
    cfg = ExperimentConfig(scenario=scenario, seeds=seeds, alphas=alphas)
    cfg.intervention.rank = rank
    cfg.data.gap_strength = gap
    cfg.hyper.lr = lr
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize(
    "text,match",
    [
        ("[hyper]\nlrr = 0.1\n", "hyper.lrr"),
        ("colour = 1\n", "colour"),
        ("[hyper]\nlr = 'fast'\n", "hyper.lr"),
        ("seeds = [1, 'a']\n", "seeds"),
        ("scenario = 'XIL'\n", "scenario"),
        ("alphas = [0.0]\n", "alphas"),
        ("[intervention]\nrank = 999\n", "rank"),
        ("[data]\ndim = 10\n", "data.dim"),
        ("not toml [", "invalid TOML"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.loads(text).validate()


def test_cli_unknown_key_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[hyper]\nlrr = 0.1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config" and "hyper.lrr" in err["message"]
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["run", "--config", str(bad.parent / "bad.toml"), "--layers", "a,b"]) == 2


# ---- run


def test_run_outputs_and_metric_identity(small_cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(small_cfg), "--out", str(out)]) == 0
    raw = (out / "results.csv").read_bytes()
    assert raw.startswith(b"run_id,seed,scenario,rank,layers,alpha,stage,last,avg,params,wall_time_s\r\n")
    rows = _rows(out / "results.csv")
    assert [int(r["stage"]) for r in rows] == [1, 2, 3]
    assert rows[0]["layers"] == "0,1" and rows[0]["params"] == str(2 * (2 * 2 * 16 + 2))
    # independent recomputation of every Avg from the Last column
    running = []
    for r in rows:
        running.append(float(r["last"]))
        assert float(r["avg"]) == sum(running) / len(running)
    per_task = _rows(out / "per_task.csv")
    assert [(r["stage"], r["task"]) for r in per_task] == [("1", "1"), ("2", "1"), ("2", "2"), ("3", "1"), ("3", "2"), ("3", "3")]
    assert per_task[0]["accuracy"] == rows[0]["last"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["runs"][0]["avg"] == float(rows[-1]["avg"])
    assert ExperimentConfig.load(out / "config.toml").data.n_classes == 6


def test_run_determinism(small_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(small_cfg), "--out", str(a), "--seed", "1993"]) == 0
    assert main(["run", "--config", str(small_cfg), "--out", str(b), "--seed", "1993"]) == 0
    assert _strip_wall((a / "results.csv").read_text()) == _strip_wall((b / "results.csv").read_text())


def test_seed_sweep_gives_distinct_reproducible_runs(small_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("CORE_REFT_THREADS", "1")
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(small_cfg), "--out", str(out), "--axis", "seed"]) == 0
    rows = _rows(out / "results.csv")
    groups = {}
    for r in rows:
        groups.setdefault(r["run_id"], []).append((r["last"], r["avg"]))
    assert len(groups) == 5 and {r["seed"] for r in rows} == {"1991", "1992", "1993", "1994", "1995"}
    assert len({tuple(v) for v in groups.values()}) == 5
    # rerunning one cell against the same checkpoint reproduces it exactly
    again = tmp_path / "again"
    cell_cfg = out / "cells" / "seed-1992" / "config.toml"
    assert main(["run", "--config", str(cell_cfg), "--out", str(again)]) == 0
    assert _strip_wall((again / "results.csv").read_text()) == _strip_wall(
        (out / "cells" / "seed-1992" / "results.csv").read_text()
    )


def test_rank_sweep_records_failing_cell(small_cfg, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CORE_REFT_THREADS", "1")
    out = tmp_path / "ranks"
    code = main(["sweep", "--config", str(small_cfg), "--out", str(out), "--axis", "rank", "--values", "1,2,4,8,32"])
    assert code == 1
    report = json.loads((out / "sweep.json").read_text())
    status = {c["value"]: c["status"] for c in report["cells"]}
    assert status == {1: "ok", 2: "ok", 4: "ok", 8: "ok", 32: "error"}
    assert "rank=32" in capsys.readouterr().err
    assert len({r["run_id"] for r in _rows(out / "results.csv")}) == 4


def test_layer_sweep_scales_counts(small_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("CORE_REFT_THREADS", "1")
    out = tmp_path / "layers"
    assert main(["sweep", "--config", str(small_cfg), "--out", str(out), "--axis", "layers"]) == 0
    layers = {r["layers"] for r in _rows(out / "results.csv")}
    assert layers == {"1", "0,1"}


def test_alpha_flag_and_pretrain(small_cfg, tmp_path):
    out = tmp_path / "p"
    assert main(["pretrain", "--config", str(small_cfg), "--out", str(out)]) == 0
    info = json.loads((out / "pretrain.json").read_text())
    assert (out / "encoder.bin").exists() and math.isfinite(info["val_accuracy"])
    cfg = ExperimentConfig.load(small_cfg)
    cfg.encoder.checkpoint = str(out / "encoder.bin")
    cfg_path = tmp_path / "ck.toml"
    cfg_path.write_text(cfg.dumps())
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "r"), "--alpha", "0.1"]) == 0
    assert {r["alpha"] for r in _rows(tmp_path / "r" / "results.csv")} == {"0.1"}
    cfg.encoder.depth = 3
    cfg_path.write_text(cfg.dumps())
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "r2")]) == 2


# ---- verify


def test_verify_exit_codes(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path / "ok")]) == 0
    report = (tmp_path / "ok" / "report.txt").read_text()
    assert "all properties hold" in report and "[FAIL]" not in report
    assert main(["verify", "--out", str(tmp_path / "bad"), "--inject-fault"]) == 3
    assert "failing: intervention gradients (all)" in (tmp_path / "bad" / "report.txt").read_text()
