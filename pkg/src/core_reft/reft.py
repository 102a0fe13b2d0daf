"""Low-rank representation editing.

An intervention at one encoder block is the triple ``(R, W, b)`` with ``R``
and ``W`` of shape ``(rank, dim)`` and ``b`` of shape ``(rank,)``.  It edits a
hidden state ``h`` as

    h + R^T (W h + b - R h)

so the edit lies in the row space of ``R``.  All functions accept either a
single vector ``(dim,)`` or a batch of row vectors ``(n, dim)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointTruncatedError, CheckpointVersionError, ShapeError
from .linalg import SeededRng, sigma_max

INTERVENTION_MAGIC = b"COREINT1"


@dataclass
class InterventionParams:
    R: np.ndarray
    W: np.ndarray
    b: np.ndarray
    layer: int = 0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.R.ndim != 2 or self.W.shape != self.R.shape or self.b.shape != (self.R.shape[0],):
            raise ShapeError(
                f"inconsistent intervention shapes R{self.R.shape} W{self.W.shape} b{self.b.shape}"
            )
        if not 1 <= self.rank <= self.dim:
            raise ShapeError(f"rank {self.rank} must lie in [1, dim={self.dim}]")

    @property
    def rank(self) -> int:
        return self.R.shape[0]

    @property
    def dim(self) -> int:
        return self.R.shape[1]

    def copy(self) -> "InterventionParams":
        return InterventionParams(self.R.copy(), self.W.copy(), self.b.copy(), self.layer)

    def num_params(self) -> int:
        return self.R.size + self.W.size + self.b.size


@dataclass
class InterventionConfig:
    layers: list = field(default_factory=lambda: [0])
    rank: int = 8
    positions: str = "all"
    lambda_orth: float = 1.0
    init_seed: int = 1993

    def validate(self, depth: int | None = None, dim: int | None = None):
        if len(set(self.layers)) != len(self.layers):
            raise ValueError(f"duplicate intervention layers: {self.layers}")
        if any(layer < 0 for layer in self.layers):
            raise ValueError(f"negative layer index in {self.layers}")
        if depth is not None and any(layer >= depth for layer in self.layers):
            raise ValueError(f"layer index out of range for depth {depth}: {self.layers}")
        if self.positions not in ("all", "cls"):
            raise ValueError(f"positions must be 'all' or 'cls', got {self.positions!r}")
        if self.lambda_orth < 0:
            raise ValueError("lambda_orth must be >= 0")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if dim is not None and self.rank > dim:
            raise ShapeError(f"rank {self.rank} exceeds hidden dim {dim}")


def _check_dim(h, dim, what="h"):
    if h.shape[-1] != dim:
        raise ShapeError(f"{what} has trailing dimension {h.shape[-1]}, expected {dim}")


def dii(h_b, h_s, R) -> np.ndarray:
    """Interchange the ``R``-subspace component of ``h_b`` with that of ``h_s``."""
    h_b = np.asarray(h_b, dtype=np.float64)
    h_s = np.asarray(h_s, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    _check_dim(h_b, R.shape[1], "h_b")
    if h_s.shape != h_b.shape:
        raise ShapeError(f"h_s shape {h_s.shape} differs from h_b shape {h_b.shape}")
    return h_b + (h_s @ R.T - h_b @ R.T) @ R


def edit_source(h, p: InterventionParams) -> np.ndarray:
    """The low-rank residual ``W h + b - R h``, shape ``(..., rank)``."""
    # (W - R) is exactly zero when W == R, so the identity edit is exact
    return h @ (p.W - p.R).T + p.b


def loreft(h, p: InterventionParams) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    _check_dim(h, p.dim)
    return h + edit_source(h, p) @ p.R


def orth_penalty(R) -> float:
    """Squared Frobenius distance of ``R R^T`` from the identity."""
    R = np.asarray(R, dtype=np.float64)
    gap = R @ R.T - np.eye(R.shape[0])
    return float(np.sum(gap * gap))


def orth_penalty_grad(R) -> np.ndarray:
    """Gradient of :func:`orth_penalty` with respect to ``R``: ``4 (R R^T - I) R``."""
    R = np.asarray(R, dtype=np.float64)
    return 4.0 * (R @ R.T - np.eye(R.shape[0])) @ R


@dataclass
class BoundCheck:
    delta_norm: float
    bound: float
    holds: bool
    # variant bound sigma_max * ||(W - I)e + b||, only defined for rank == dim
    variant_bound: float | None = None
    variant_holds: bool | None = None


def delta_bound_check(p: InterventionParams, e, tol: float = 1e-9) -> BoundCheck:
    """Compare the edit magnitude against ``sigma_max(R^T) * ||W e + b - R e||``."""
    e = np.asarray(e, dtype=np.float64)
    _check_dim(e, p.dim, "e")
    u = edit_source(e, p)
    delta = float(np.linalg.norm(u @ p.R))
    smax = sigma_max(p.R.T, max_iters=1000, tol=1e-13)
    bound = smax * float(np.linalg.norm(u))
    check = BoundCheck(delta, bound, delta <= bound + tol)
    if p.rank == p.dim:
        printed = smax * float(np.linalg.norm(e @ (p.W - np.eye(p.dim)).T + p.b))
        check.variant_bound = printed
        check.variant_holds = delta <= printed + tol
    return check


def alignment_loss(e_s, e_b, p: InterventionParams) -> float:
    """Squared distance of the edited ``e_b`` from ``e_s`` plus the orthogonality penalty."""
    e_s = np.asarray(e_s, dtype=np.float64)
    e_b = np.asarray(e_b, dtype=np.float64)
    _check_dim(e_s, p.dim, "e_s")
    diff = e_s - loreft(e_b, p)
    return float(np.sum(diff * diff)) + orth_penalty(p.R)


def param_count(cfg: InterventionConfig, dim: int) -> int:
    return len(cfg.layers) * (2 * cfg.rank * dim + cfg.rank)


def init_interventions(cfg: InterventionConfig, dim: int) -> list[InterventionParams]:
    """Fresh interventions that leave the encoder output unchanged.

    ``R`` gets orthonormal rows from a QR factorisation of a seeded Gaussian,
    ``W`` starts as a copy of ``R`` and ``b`` at zero, so ``W h + b - R h`` is
    exactly zero.
    """
    if cfg.rank > dim:
        raise ShapeError(f"rank {cfg.rank} exceeds hidden dim {dim}")
    cfg.validate(dim=dim)
    rng = SeededRng(cfg.init_seed)
    out = []
    for layer in cfg.layers:
        g = rng.spawn(layer).normal(size=(dim, cfg.rank))
        q, r = np.linalg.qr(g)
        # sign fix makes the factorisation unique
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        R = np.ascontiguousarray(q.T)
        out.append(InterventionParams(R, R.copy(), np.zeros(cfg.rank), layer))
    return out


def save_interventions(params: list[InterventionParams], positions: str = "all") -> bytes:
    """Serialize to the ``COREINT1`` container.

    Layout: magic, uint32-LE header length, UTF-8 JSON header
    ``{"positions", "layers", "rank", "dim"}``, then for each layer in header
    order the float64-LE values of R, W, b (row-major).
    """
    header = {
        "positions": positions,
        "layers": [p.layer for p in params],
        "rank": [p.rank for p in params],
        "dim": [p.dim for p in params],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [INTERVENTION_MAGIC, struct.pack("<I", len(raw)), raw]
    for p in params:
        for arr in (p.R, p.W, p.b):
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(blobs)


def load_interventions(data: bytes) -> tuple[list[InterventionParams], str]:
    if data[:8] != INTERVENTION_MAGIC:
        raise CheckpointVersionError(f"expected magic {INTERVENTION_MAGIC!r}, found {bytes(data[:8])!r}")
    if len(data) < 12:
        raise CheckpointTruncatedError("intervention checkpoint truncated in header")
    (n,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + n:
        raise CheckpointTruncatedError("intervention checkpoint truncated in header")
    header = json.loads(data[12 : 12 + n].decode("utf-8"))
    off = 12 + n
    params = []
    for layer, rank, dim in zip(header["layers"], header["rank"], header["dim"]):
        arrays = []
        for shape in ((rank, dim), (rank, dim), (rank,)):
            size = int(np.prod(shape)) * 8
            if len(data) < off + size:
                raise CheckpointTruncatedError(f"intervention checkpoint truncated at layer {layer}")
            arrays.append(np.frombuffer(data[off : off + size], dtype="<f8").reshape(shape).astype(np.float64))
            off += size
        params.append(InterventionParams(*arrays, layer=layer))
    if off != len(data):
        raise CheckpointTruncatedError(f"{len(data) - off} trailing bytes in intervention checkpoint")
    return params, header["positions"]
