"""Datasets: synthetic generators, file loaders, task splitting, imbalance.

Every generator is a pure function of its seed.
"""

from __future__ import annotations

import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataFormatError,
    EmptyInputError,
    NonNumericCellError,
    RaggedRowError,
)
from .linalg import SeededRng


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    domains: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64)
            if self.domains.shape != self.labels.shape:
                raise ValueError("domains must have one entry per sample")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.inputs[idx],
            self.labels[idx],
            self.num_classes,
            None if self.domains is None else self.domains[idx],
        )

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        with_dom = all(p.domains is not None for p in parts)
        return Dataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
            max(p.num_classes for p in parts),
            np.concatenate([p.domains for p in parts]) if with_dom else None,
        )


@dataclass
class ImbalanceSpec:
    alpha: float
    base_count: int

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.base_count < 1:
            raise ValueError("base_count must be >= 1")


@dataclass
class Task:
    task_id: int
    classes: tuple
    domain_id: int
    train: Dataset
    test: Dataset


@dataclass
class TaskStream:
    scenario: str
    tasks: list
    class_order: list = field(default_factory=list)

    def validate(self):
        if self.scenario not in ("TIL", "DIL", "CIL"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not self.tasks:
            raise EmptyInputError("task stream has no tasks")
        sets = [set(t.classes) for t in self.tasks]
        if self.scenario == "DIL":
            if any(s != sets[0] for s in sets):
                raise ValueError("DIL tasks must share one class set")
            doms = [t.domain_id for t in self.tasks]
            if len(set(doms)) != len(doms):
                raise ValueError("DIL tasks must have distinct domain ids")
        else:
            seen = set()
            for t, s in zip(self.tasks, sets):
                if seen & s:
                    raise ValueError(f"task {t.task_id} repeats classes {sorted(seen & s)}")
                seen |= s
        return self


# ---------------------------------------------------------------- synthetic data


def _cluster_means(rng, n_classes, dim, separation):
    # E|m_i - m_j| = separation when entries are N(0, separation^2 / (2 dim))
    return rng.normal(size=(n_classes, dim), scale=separation / math.sqrt(2.0 * dim))


def _sample_clusters(rng, means, per_class, noise=1.0):
    n_classes, dim = means.shape
    labels = np.repeat(np.arange(n_classes), per_class)
    x = means[labels] + rng.normal(size=(len(labels), dim), scale=noise)
    return x, labels


@dataclass
class TokenLayout:
    """How a flat synthetic sample splits into tokens.

    Class identity lives in a ``signal_rank``-dimensional subspace of each
    token; the remaining token directions carry only noise.  A shared latent
    code of size ``latent`` is mixed differently into every token.
    """

    tokens: int = 8
    token_dim: int = 8
    signal_rank: int = 6
    latent: int = 16

    @property
    def dim(self) -> int:
        return self.tokens * self.token_dim

    def validate(self):
        if self.tokens < 1 or self.token_dim < 1 or self.latent < 1:
            raise ValueError("tokens, token_dim and latent must be >= 1")
        if not 1 <= self.signal_rank < self.token_dim:
            raise ValueError(f"signal_rank must lie in [1, token_dim), got {self.signal_rank}")


def _token_basis(rng, layout: TokenLayout):
    basis, _ = np.linalg.qr(rng.normal(size=(layout.token_dim, layout.token_dim)))
    mixing = rng.normal(size=(layout.tokens, layout.signal_rank, layout.latent)) / math.sqrt(layout.latent)
    return basis[:, : layout.signal_rank], basis[:, layout.signal_rank :], mixing


def _token_clusters(rng, layout: TokenLayout, signal, mixing, n_classes, per_class, separation, noise):
    # latent means are scaled so class means sit about `separation` apart in input space
    scale = separation / math.sqrt(2.0 * layout.latent) * math.sqrt(layout.latent / (layout.signal_rank * layout.tokens))
    means = rng.normal(size=(n_classes, layout.latent), scale=scale)
    labels = np.repeat(np.arange(n_classes), per_class)
    z = np.einsum("jsl,nl->njs", mixing, means[labels])
    x = z @ signal.T + rng.normal(size=(len(labels), layout.tokens, layout.token_dim), scale=noise)
    return x.reshape(len(labels), layout.dim), labels


def gap_transform(layout: TokenLayout, gap_strength, seed, shift=1.0):
    """Per-token affine map ``t -> t A^T + c`` applied to downstream data.

    ``A`` stretches the noise-only directions of each token by ``1 + gap * s``
    with ``s`` in ``[1, 2)`` and ``c`` shifts along them with norm
    ``gap * shift``.  Class-carrying directions are untouched, so the damage is
    done to how the pretrained encoder reacts to the inputs, not to the
    information in them.  ``gap_strength == 0`` gives ``A = I, c = 0``.
    """
    layout.validate()
    rng = SeededRng(seed)
    _, nuisance, _ = _token_basis(rng.spawn(0), layout)
    g = rng.spawn(3)
    k = layout.token_dim - layout.signal_rank
    s = 1.0 + g.uniform(size=k)
    A = np.eye(layout.token_dim) + gap_strength * (nuisance * s) @ nuisance.T
    c = nuisance @ g.normal(size=k)
    c *= gap_strength * shift / np.linalg.norm(c)
    return A, c


def make_synthetic_cil(
    n_classes,
    dim,
    per_class,
    gap_strength,
    seed,
    base_classes=None,
    base_per_class=None,
    tokens=8,
    signal_rank=None,
    latent=16,
    separation=10.0,
    noise=1.0,
    shift=1.0,
):
    """Pretraining and downstream token-structured Gaussian-cluster datasets.

    Each sample is ``tokens`` blocks of ``dim // tokens`` features (see
    :class:`TokenLayout`).  Base and downstream share the generator but draw
    disjoint class means; downstream samples then pass through
    :func:`gap_transform`.  Returns ``(base, downstream)`` with downstream
    labels ``0..n_classes-1``.
    """
    if n_classes < 2 or per_class < 2:
        raise ValueError("need n_classes >= 2 and per_class >= 2")
    if dim < 2 or tokens < 1 or dim % tokens:
        raise ValueError(f"dim {dim} must be a positive multiple of tokens={tokens}")
    token_dim = dim // tokens
    if token_dim < 2:
        raise ValueError("need at least 2 features per token")
    if signal_rank is None:
        signal_rank = max(1, (3 * token_dim) // 4)
    layout = TokenLayout(tokens, token_dim, signal_rank, latent)
    layout.validate()
    base_classes = base_classes or n_classes
    base_per_class = base_per_class or per_class
    rng = SeededRng(seed)
    signal, _, mixing = _token_basis(rng.spawn(0), layout)
    bx, by = _token_clusters(rng.spawn(1), layout, signal, mixing, base_classes, base_per_class, separation, noise)
    dx, dy = _token_clusters(rng.spawn(2), layout, signal, mixing, n_classes, per_class, separation, noise)
    if gap_strength:
        A, c = gap_transform(layout, gap_strength, seed, shift)
        dx = (dx.reshape(-1, tokens, token_dim) @ A.T + c).reshape(-1, dim)
    return Dataset(bx, by, base_classes), Dataset(dx, dy, n_classes)


def domain_transforms(n_domains, dim, seed, shift_scale=12.0):
    """Per-domain ``(Q, c)``: a random rotation and a shift of norm ``shift_scale``."""
    rng = SeededRng(seed).spawn(11)
    out = []
    for _ in range(n_domains):
        q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        c = rng.normal(size=dim)
        out.append((q, c * shift_scale / np.linalg.norm(c)))
    return out


def make_synthetic_dil(n_domains, n_classes, per_class, seed, dim=128, separation=8.0, shift_scale=12.0,
                       rotation=0.4):
    """One shared class structure observed under ``n_domains`` domain transforms.

    Domain ``k`` maps ``x -> x M_k^T + c_k`` where ``M_k`` interpolates between
    the identity and a random orthogonal matrix (weight ``rotation``).  Every
    eigenvalue of ``M_k`` has modulus at least ``1 - 2 * rotation``, so a weight
    below 1/2 keeps each domain map invertible.
    """
    if not 0 <= rotation < 0.5:
        raise ValueError(f"rotation must lie in [0, 0.5), got {rotation}")
    if n_domains < 2:
        raise ValueError("need n_domains >= 2")
    if n_classes < 2 or per_class < 1:
        raise ValueError("need n_classes >= 2 and per_class >= 1")
    rng = SeededRng(seed)
    means = _cluster_means(rng.spawn(1), n_classes, dim, separation)
    xs, ys, ds = [], [], []
    for k, (q, c) in enumerate(domain_transforms(n_domains, dim, seed, shift_scale)):
        m = (1.0 - rotation) * np.eye(dim) + rotation * q
        x, y = _sample_clusters(rng.spawn(100 + k), means, per_class)
        xs.append(x @ m.T + c)
        ys.append(y)
        ds.append(np.full(len(y), k))
    return Dataset(np.concatenate(xs), np.concatenate(ys), n_classes, np.concatenate(ds))


def domain_linear_parts(n_domains, dim, seed, rotation=0.4):
    """The linear parts ``M_k`` used by :func:`make_synthetic_dil`."""
    return [(1.0 - rotation) * np.eye(dim) + rotation * q for q, _ in domain_transforms(n_domains, dim, seed)]


# ---------------------------------------------------------------- imbalance and splitting


def imbalance_counts(spec: ImbalanceSpec, n_classes: int) -> list[int]:
    """``max(1, round_half_up(M * alpha**(i/N)))`` for ranks ``i = 1..N``."""
    return [max(1, math.floor(spec.base_count * spec.alpha ** (i / n_classes) + 0.5)) for i in range(1, n_classes + 1)]


def imbalance_sample(ds: Dataset, spec: ImbalanceSpec, seed, class_order=None) -> Dataset:
    """Subsample so the class at rank ``i`` (1-based) keeps ``imbalance_counts[i-1]`` rows.

    ``class_order`` lists class ids by rank; default is ascending class id.
    """
    order = list(range(ds.num_classes)) if class_order is None else list(class_order)
    counts = imbalance_counts(spec, len(order))
    rng = SeededRng(seed)
    keep = []
    for rank, (cls, need) in enumerate(zip(order, counts), start=1):
        idx = np.flatnonzero(ds.labels == cls)
        if len(idx) == 0:
            raise ValueError(f"class {cls} (rank {rank}) has no samples")
        if len(idx) < need:
            raise ValueError(f"class {cls} (rank {rank}) has {len(idx)} samples, needs {need}")
        keep.append(np.sort(idx[rng.choice(len(idx), need, replace=False)]))
    return ds.subset(np.concatenate(keep)) if keep else ds.subset([])


def _stratified(ds: Dataset, classes, rng, test_frac):
    train, test = [], []
    for cls in classes:
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(math.floor(len(idx) * test_frac + 0.5))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return ds.subset(np.sort(np.concatenate(train))), ds.subset(np.sort(np.concatenate(test)))


def split_tasks(ds: Dataset, inc: int, seed: int = 1993, test_frac: float = 0.2, scenario: str = "CIL") -> TaskStream:
    """Shuffle the class order with ``seed`` and cut it into tasks of ``inc`` classes.

    When ``num_classes`` is not a multiple of ``inc`` the last task holds the
    remainder.  Each task's samples are split per class into train/test.
    """
    if inc < 1:
        raise ValueError(f"inc must be >= 1, got {inc}")
    if inc > ds.num_classes:
        raise ValueError(f"inc={inc} exceeds num_classes={ds.num_classes}")
    rng = SeededRng(seed)
    order = [int(c) for c in rng.permutation(ds.num_classes)]
    tasks = []
    for t, start in enumerate(range(0, ds.num_classes, inc)):
        classes = tuple(sorted(order[start : start + inc]))
        train, test = _stratified(ds, classes, rng, test_frac)
        tasks.append(Task(t, classes, 0, train, test))
    return TaskStream(scenario, tasks, order).validate()


def split_domains(ds: Dataset, seed: int = 1993, test_frac: float = 0.2) -> TaskStream:
    """One DIL task per domain, in ascending domain id."""
    if ds.domains is None:
        raise ValueError("dataset carries no domain ids")
    rng = SeededRng(seed)
    tasks = []
    classes = tuple(range(ds.num_classes))
    for t, dom in enumerate(np.unique(ds.domains)):
        part = ds.subset(np.flatnonzero(ds.domains == dom))
        train, test = _stratified(part, classes, rng, test_frac)
        tasks.append(Task(t, classes, int(dom), train, test))
    return TaskStream("DIL", tasks, list(classes)).validate()


def imbalance_stream(stream: TaskStream, spec: ImbalanceSpec, seed) -> TaskStream:
    """Apply :func:`imbalance_sample` to every task's training split.

    Class rank follows the stream's shuffled class order; test splits are left
    balanced.
    """
    order = stream.class_order
    pooled = Dataset.concat([t.train for t in stream.tasks])
    sampled = imbalance_sample(pooled, spec, seed, class_order=order)
    tasks = []
    for t in stream.tasks:
        mask = np.isin(sampled.labels, t.classes)
        tasks.append(Task(t.task_id, t.classes, t.domain_id, sampled.subset(np.flatnonzero(mask)), t.test))
    return TaskStream(stream.scenario, tasks, list(order)).validate()


# ---------------------------------------------------------------- file formats

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Read an unsigned-byte IDX array (big-endian header)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise BadMagicError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    if magic >> 8 != 0x08 or magic & 0xFF == 0:
        raise BadMagicError(f"{path}: magic {magic:#010x} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end != count:
        raise DataFormatError(f"{path}: expected {count} data bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw[header_end:], dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path, num_classes=None) -> Dataset:
    """MNIST-style image/label pair; pixels scaled to [0, 1], one row per image."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    n_cls = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 0
    return Dataset(x, labels, n_cls)


def load_csv(path, num_classes=None) -> Dataset:
    """CSV with header ``label,f0,f1,...`` and one sample per row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        width = len(header)
        if not header or header[0] != "label" or header[1:] != [f"f{i}" for i in range(width - 1)]:
            raise DataFormatError(f"{path}: header must be label,f0,f1,...")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRowError(f"{path}:{lineno}: {len(row)} cells, header has {width}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise NonNumericCellError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise NonNumericCellError(f"{path}:{lineno}: non-finite value")
            labels.append(label)
            rows.append(values)
    x = np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)
    y = np.array(labels, dtype=np.int64)
    n_cls = num_classes if num_classes is not None else (int(y.max()) + 1 if len(y) else 0)
    return Dataset(x, y, n_cls)


def write_csv(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(ds.inputs.shape[1])])
        for label, row in zip(ds.labels, ds.inputs):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def load_manifest(path) -> Dataset:
    """Assemble a dataset from a JSON manifest.

    ``{"num_classes": N, "sources": [{"csv": "a.csv", "domain": 0},
    {"images": "x.idx", "labels": "y.idx", "domain": 1}]}``; relative paths
    resolve against the manifest's directory and ``domain`` is optional.
    """
    path = Path(path)
    spec = json.loads(path.read_text(encoding="utf-8"))
    n_cls = int(spec["num_classes"])
    parts = []
    for src in spec["sources"]:
        if "csv" in src:
            part = load_csv(path.parent / src["csv"], n_cls)
        else:
            part = load_idx(path.parent / src["images"], path.parent / src["labels"], n_cls)
        if "domain" in src:
            part.domains = np.full(len(part), int(src["domain"]))
        parts.append(part)
    return Dataset.concat(parts)
