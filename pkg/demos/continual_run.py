"""Frozen backbone vs first-task edits vs full finetuning on the synthetic stream.

Pretrains the small encoder once, then runs the 5-task class-incremental
stream for each method under the default configuration.  Pass run seeds on
the command line (default: 1993); the acceptance suite uses 1991-1995.

    python demos/continual_run.py 1991 1992 1993
"""

import copy
import statistics
import sys
import time

from core_reft.config import ExperimentConfig
from core_reft.experiment import build_data, pretrain_encoder, run_experiment

seeds = [int(s) for s in sys.argv[1:]] or [1993]
cfg = ExperimentConfig(seeds=seeds).validate()
base, down = build_data(cfg)

started = time.perf_counter()
enc, info = pretrain_encoder(cfg, base)
print(f"pretrained in {time.perf_counter() - started:.0f}s, held-out accuracy {info['val_accuracy']:.1f}% "
      f"(chance {info['chance']:.1f}%)")

for method in ("frozen", "finetune", "core"):
    c = copy.deepcopy(cfg)
    c.method = method
    rows = run_experiment(c, enc, down)
    finals = [r for r in rows if r.stage == 5]
    lasts = " ".join(f"{r.last:5.1f}" for r in rows if r.seed == seeds[0])
    print(f"{method:9s} params {finals[0].params:6d}  Avg {statistics.fmean(r.avg for r in finals):5.2f}  "
          f"Last per stage (seed {seeds[0]}): {lasts}")
