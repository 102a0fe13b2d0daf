"""Randomized property suites behind ``core-reft verify``.

Each check returns a :class:`PropertyResult`; :func:`run_all` runs every
suite and :func:`format_report` renders the human-readable report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .continual import MetricsTable
from .data import ImbalanceSpec, imbalance_counts
from .linalg import SeededRng
from .nn import EncoderConfig, FrozenEncoder, backward, forward
from .reft import InterventionConfig, InterventionParams, delta_bound_check, dii, init_interventions, loreft

BOUND_SHAPES = ((32, 4), (64, 8), (64, 64))


@dataclass
class PropertyResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def _orthonormal_rows(rng, rank, dim):
    q, _ = np.linalg.qr(rng.normal(size=(dim, rank)))
    return q.T


def check_identities(draws=1000, seed=0, tol=1e-12) -> PropertyResult:
    """``dii(h, h, R) == h`` and the ``W = R, b = 0`` edit leaves ``h`` unchanged."""
    rng = SeededRng(seed)
    worst_dii = worst_edit = 0.0
    for _ in range(draws):
        dim = int(rng.integers(1, 65))
        rank = int(rng.integers(1, dim + 1))
        h = rng.normal(size=dim, scale=10.0)
        R = rng.normal(size=(rank, dim))
        worst_dii = max(worst_dii, float(np.max(np.abs(dii(h, h, R) - h))))
        p = InterventionParams(R, R.copy(), np.zeros(rank))
        worst_edit = max(worst_edit, float(np.max(np.abs(loreft(h, p) - h))))
    return PropertyResult(
        "identity edits",
        worst_dii < tol and worst_edit < tol,
        {"draws": draws, "max_dev_interchange": worst_dii, "max_dev_edit": worst_edit, "tol": tol},
    )


def check_bound(draws=1000, shapes=BOUND_SHAPES, seed=0, tight_tol=1e-9) -> PropertyResult:
    """Edit magnitude ``||R^T (W e + b - R e)||`` against ``sigma_max(R^T) ||W e + b - R e||``.

    Random ``R`` tests the inequality; row-orthonormal ``R`` tests that it is
    tight.  For square interventions the alternative form with ``(W - I) e + b``
    on the right is also evaluated and its violations are counted.
    """
    rng = SeededRng(seed)
    details = {"draws_per_shape": draws, "total_draws": 2 * draws * len(shapes)}
    ok = True
    notes = []
    for dim, rank in shapes:
        violations = 0
        worst_tight = 0.0
        variant_fail = 0
        for _ in range(draws):
            R = rng.normal(size=(rank, dim), scale=0.1 + 1.9 * float(rng.uniform()))
            W = rng.normal(size=(rank, dim))
            b = rng.normal(size=rank)
            e = rng.normal(size=dim, scale=0.1 + 9.9 * float(rng.uniform()))
            chk = delta_bound_check(InterventionParams(R, W, b), e)
            violations += not chk.holds
            if chk.variant_holds is False:
                variant_fail += 1
            Q = _orthonormal_rows(rng, rank, dim)
            tight = delta_bound_check(InterventionParams(Q, W, b), e)
            worst_tight = max(worst_tight, abs(tight.bound - tight.delta_norm) / max(1.0, tight.bound))
        key = f"d{dim}_r{rank}"
        details[f"{key}_violations"] = violations
        details[f"{key}_orthonormal_max_gap"] = worst_tight
        ok &= violations == 0 and worst_tight < tight_tol
        if rank == dim:
            details[f"{key}_alt_form_violations"] = variant_fail
            notes.append(
                f"d={dim}, r={rank}: the variant bound sigma_max * ||(W - I) e + b|| failed on "
                f"{variant_fail}/{draws} random draws; it is only defined when rank == dim and is "
                "reported here, not enforced. The enforced bound uses ||W e + b - R e||."
            )
    notes.append("for rank < dim the variant (W - I) e + b is not defined (W is rank x dim)")
    return PropertyResult("edit magnitude bound", ok, details, notes)


def _tiny_setup(seed):
    cfg = EncoderConfig(depth=2, dim=16, heads=2, input_mode="tokens", num_patches=4, token_dim=3, seed=seed)
    enc = FrozenEncoder(cfg).freeze()
    rng = SeededRng(seed + 1)
    ivs = init_interventions(InterventionConfig(layers=[0, 1], rank=3, init_seed=seed), cfg.dim)
    # move away from the identity edit so every gradient term is exercised
    for iv in ivs:
        iv.R += rng.normal(size=iv.R.shape, scale=0.1)
        iv.W += rng.normal(size=iv.W.shape, scale=0.3)
        iv.b += rng.normal(size=iv.b.shape, scale=0.3)
    x = rng.normal(size=(5, cfg.input_dim))
    probe = rng.normal(size=(5, cfg.dim))
    return enc, ivs, x, probe


def gradcheck_interventions(n_coords=120, seed=0, eps=1e-5, tol=1e-4, positions="all", fault=False) -> PropertyResult:
    """Analytic intervention gradients against central differences.

    The scalar objective is ``sum(features * probe)`` for a fixed random
    ``probe`` on a 2-block, width-16 encoder.  ``fault=True`` perturbs one
    analytic gradient entry to confirm the check can fail.
    """
    enc, ivs, x, probe = _tiny_setup(seed)
    feats, tape = forward(enc, x, ivs, positions)
    grads = backward(tape, probe).interventions
    if fault:
        grads[ivs[0].layer]["W"][0, 0] += 1e-2
    coords = [(iv, part, j) for iv in ivs for part in ("R", "W", "b") for j in range(getattr(iv, part).size)]
    rng = SeededRng(seed + 2)
    pick = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    if fault and 0 not in pick.tolist():
        # the faulty coordinate (first layer, W[0, 0]) is always among the checked ones
        pick[0] = next(i for i, c in enumerate(coords) if c[0] is ivs[0] and c[1] == "W" and c[2] == 0)
    worst = 0.0
    for i in sorted(int(v) for v in pick):
        iv, part, j = coords[i]
        arr = getattr(iv, part)
        idx = np.unravel_index(j, arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        up = float(np.sum(forward(enc, x, ivs, positions)[0] * probe))
        arr[idx] = old - eps
        down = float(np.sum(forward(enc, x, ivs, positions)[0] * probe))
        arr[idx] = old
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[iv.layer][part][idx])
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return PropertyResult(
        f"intervention gradients ({positions})",
        worst < tol,
        {"coords": len(pick), "max_rel_error": worst, "tol": tol, "fault_injected": fault},
    )


def check_metric_identity(draws=500, seed=0) -> PropertyResult:
    """``avg[t] == sum(last[:t+1]) / (t+1)`` bit for bit."""
    rng = SeededRng(seed)
    bad = 0
    for _ in range(draws):
        table = MetricsTable()
        for _ in range(int(rng.integers(1, 11))):
            total = int(rng.integers(1, 500))
            table.append(100.0 * int(rng.integers(0, total + 1)) / total)
        for t, avg in enumerate(table.avg, start=1):
            bad += avg != sum(table.last[:t]) / t
    return PropertyResult("metric identity", bad == 0, {"draws": draws, "mismatches": bad})


def check_imbalance_counts() -> PropertyResult:
    """Per-class counts against ``max(1, floor(M * alpha**(i/N) + 1/2))``."""
    mismatches, cells = 0, 0
    for alpha in (1.0, 0.5, 0.1, 0.05, 0.01):
        for n in (1, 2, 5, 10, 100):
            for m in (1, 10, 48, 500):
                got = imbalance_counts(ImbalanceSpec(alpha, m), n)
                want = [max(1, math.floor(m * alpha ** (i / n) + 0.5)) for i in range(1, n + 1)]
                mismatches += got != want
                cells += 1
    return PropertyResult("imbalance counts", mismatches == 0, {"grid_cells": cells, "mismatches": mismatches})


def run_all(seed=0, draws=1000, fault=False) -> list[PropertyResult]:
    return [
        check_identities(draws, seed),
        check_bound(draws, seed=seed),
        gradcheck_interventions(seed=seed, positions="all", fault=fault),
        gradcheck_interventions(seed=seed, positions="cls"),
        check_metric_identity(seed=seed),
        check_imbalance_counts(),
    ]


def format_report(results: list[PropertyResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}")
        for k, v in r.details.items():
            lines.append(f"    {k}: {v}")
        for note in r.notes:
            lines.append(f"    note: {note}")
    failed = [r.name for r in results if not r.passed]
    lines.append("")
    lines.append("all properties hold" if not failed else "failing: " + ", ".join(failed))
    return "\n".join(lines) + "\n"
