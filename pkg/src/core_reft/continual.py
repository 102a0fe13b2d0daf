"""Continual-learning protocol: first-task adaptation, prototype classifiers,
domain routing, metrics and end-to-end scenario runs.

Only the first task trains anything.  Afterwards the encoder and its
interventions are fixed and each new task just adds class-mean prototypes
(CIL), a task-specific classifier (TIL) or a k-means domain entry (DIL).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Task, TaskStream
from .errors import (
    CheckpointTruncatedError,
    CheckpointVersionError,
    DivergenceError,
    EmptyInputError,
    FrozenParameterError,
    UnknownTaskError,
)
from .linalg import SeededRng, kmeans
from .nn import FrozenEncoder, backward, encode, forward, load_encoder, save_encoder, train_backbone
from .reft import (
    InterventionConfig,
    InterventionParams,
    init_interventions,
    load_interventions,
    orth_penalty,
    orth_penalty_grad,
    save_interventions,
)
from .train import SGD, LinearHead, TrainHyper, clip_grads, cross_entropy, lr_at, minibatches

__all__ = [
    "AdaptedModel", "DomainRouter", "Learner", "MetricsTable", "PrototypeClassifier", "RunResult",
    "Task", "TaskStream", "TrainHyper", "build_prototypes", "class_means", "classify_cil", "classify_til",
    "evaluate_stage", "load_experiment", "route_and_classify_dil", "run_scenario", "save_experiment",
    "train_first_task",
]

RUN_MAGIC = b"CORERUN1"


@dataclass
class AdaptedModel:
    """Frozen encoder plus the (possibly empty) set of trained interventions."""

    encoder: FrozenEncoder
    interventions: list = field(default_factory=list)
    positions: str = "all"

    def features(self, inputs) -> np.ndarray:
        return encode(self.encoder, inputs, self.interventions, self.positions)


# ---------------------------------------------------------------- classifiers


class PrototypeClassifier:
    """Nearest-prototype classifier over unit-normalised class means."""

    def __init__(self, similarity: str = "cosine"):
        if similarity not in ("cosine", "dot"):
            raise ValueError(f"similarity must be 'cosine' or 'dot', got {similarity!r}")
        self.similarity = similarity
        self.prototypes: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.prototypes)

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def set(self, class_id: int, mean):
        mean = np.asarray(mean, dtype=np.float64)
        norm = np.linalg.norm(mean)
        self.prototypes[int(class_id)] = mean / norm if norm > 0 else mean.copy()

    def matrix(self) -> np.ndarray:
        return np.stack([self.prototypes[c] for c in self.classes])

    def scores(self, feats) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        s = feats @ self.matrix().T
        if self.similarity == "cosine":
            norms = np.linalg.norm(feats, axis=1, keepdims=True)
            s = s / np.where(norms > 0, norms, 1.0)
        return s

    def predict(self, feats) -> np.ndarray:
        if not self.prototypes:
            raise EmptyInputError("classifier has no prototypes")
        # argmax returns the first maximum, i.e. the lowest class id
        return np.asarray(self.classes)[np.argmax(self.scores(feats), axis=1)]


def class_means(feats, labels) -> dict[int, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    return {int(c): feats[labels == c].mean(axis=0) for c in np.unique(labels)}


def build_prototypes(model: AdaptedModel, data: Dataset, clf: PrototypeClassifier, classes=None):
    """Add (or overwrite) one prototype per class present in ``data``.

    ``classes``, when given, lists classes that must be covered; a missing one
    raises.
    """
    if len(data) == 0:
        raise EmptyInputError("no samples to build prototypes from")
    present = set(np.unique(data.labels).tolist())
    for c in classes or ():
        if c not in present:
            raise EmptyInputError(f"class {c} has no samples")
    for c, mean in class_means(model.features(data.inputs), data.labels).items():
        clf.set(c, mean)
    return clf


def classify_cil(feature, clf: PrototypeClassifier) -> int:
    return int(clf.predict(feature)[0])


def classify_til(feature, task_id, task_classifiers: dict) -> int:
    if task_id not in task_classifiers:
        raise UnknownTaskError(f"unknown task id {task_id}")
    return int(task_classifiers[task_id].predict(feature)[0])


class DomainRouter:
    """Per-domain k-means centers, each paired with a domain classifier."""

    def __init__(self):
        self.domains: dict[int, tuple[np.ndarray, PrototypeClassifier]] = {}

    def __len__(self):
        return len(self.domains)

    def register(self, domain_id: int, centers, clf: PrototypeClassifier):
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if centers.shape[0] < 1:
            raise ValueError("a domain needs at least one center")
        self.domains[int(domain_id)] = (centers, clf)

    def route(self, feats) -> np.ndarray:
        if not self.domains:
            raise EmptyInputError("router has no domains")
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        ids = sorted(self.domains)
        dist = np.stack(
            [np.min(((feats[:, None, :] - self.domains[d][0][None]) ** 2).sum(-1), axis=1) for d in ids], axis=1
        )
        return np.asarray(ids)[np.argmin(dist, axis=1)]

    def predict(self, feats):
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        doms = self.route(feats)
        out = np.empty(len(feats), dtype=np.int64)
        for d in np.unique(doms):
            mask = doms == d
            out[mask] = self.domains[int(d)][1].predict(feats[mask])
        return doms, out


def route_and_classify_dil(feature, router: DomainRouter) -> int:
    return int(router.predict(feature)[1][0])


@dataclass
class Learner:
    """Model plus the growing classifier state for one scenario."""

    model: AdaptedModel
    scenario: str
    similarity: str = "cosine"
    k_centers: int = 5
    seed: int = 1993
    clf: PrototypeClassifier = None
    task_classifiers: dict = field(default_factory=dict)
    router: DomainRouter = field(default_factory=DomainRouter)

    def __post_init__(self):
        if self.clf is None:
            self.clf = PrototypeClassifier(self.similarity)

    def observe(self, task: Task):
        """Grow the classifier state with one task's training split."""
        if self.scenario == "CIL":
            build_prototypes(self.model, task.train, self.clf, task.classes)
        elif self.scenario == "TIL":
            clf = PrototypeClassifier(self.similarity)
            build_prototypes(self.model, task.train, clf, task.classes)
            self.task_classifiers[task.task_id] = clf
        elif self.scenario == "DIL":
            feats = self.model.features(task.train.inputs)
            clf = PrototypeClassifier(self.similarity)
            for c, mean in class_means(feats, task.train.labels).items():
                clf.set(c, mean)
            missing = set(task.classes) - set(clf.classes)
            if missing:
                raise EmptyInputError(f"domain {task.domain_id} lacks classes {sorted(missing)}")
            k = min(self.k_centers, len(feats))
            self.router.register(task.domain_id, kmeans(feats, k, self.seed + task.domain_id), clf)
        else:
            raise ValueError(f"unknown scenario {self.scenario!r}")

    def predict(self, feats, task_id=None) -> np.ndarray:
        if self.scenario == "CIL":
            return self.clf.predict(feats)
        if self.scenario == "TIL":
            if task_id not in self.task_classifiers:
                raise UnknownTaskError(f"unknown task id {task_id}")
            return self.task_classifiers[task_id].predict(feats)
        return self.router.predict(feats)[1]


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsTable:
    """Per-stage accuracies in percent.

    ``last[t-1]`` is the accuracy over the union of test splits of tasks
    ``1..t``; ``avg[t-1] = sum(last[:t]) / t`` (left-to-right float sum).
    ``per_task[t-1][i]`` is the accuracy on task ``i+1``'s test split at stage
    ``t``.
    """

    last: list = field(default_factory=list)
    avg: list = field(default_factory=list)
    per_task: list = field(default_factory=list)

    def append(self, last: float, per_task=()):
        self.last.append(last)
        self.avg.append(sum(self.last) / len(self.last))
        self.per_task.append(list(per_task))

    def consistent(self) -> bool:
        return all(a == sum(self.last[: t + 1]) / (t + 1) for t, a in enumerate(self.avg))


def evaluate_stage(stream: TaskStream, t: int, learner: Learner):
    """Top-1 accuracy (percent) after stage ``t`` (1-based).

    Returns ``(last, per_task)``: the accuracy over the union of tasks
    ``1..t``' test splits and the per-task accuracies.
    """
    correct, total, per_task = 0, 0, []
    for task in stream.tasks[:t]:
        if len(task.test) == 0:
            per_task.append(float("nan"))
            continue
        feats = learner.model.features(task.test.inputs)
        pred = learner.predict(feats, task.task_id)
        hits = int(np.sum(pred == task.test.labels))
        correct += hits
        total += len(task.test)
        per_task.append(100.0 * hits / len(task.test))
    if total == 0:
        raise EmptyInputError(f"no test samples in tasks 1..{t}")
    return 100.0 * correct / total, per_task


# ---------------------------------------------------------------- training


def _iv_key(layer, part):
    return f"iv{layer}.{part}"


def train_first_task(
    encoder: FrozenEncoder,
    cfg: InterventionConfig,
    task1: Dataset,
    hyper: TrainHyper,
    history: dict | None = None,
    head_init: str = "prototype",
    head_scale: float = 4.0,
) -> list[InterventionParams]:
    """Fit interventions (and a throw-away linear head) on the first task.

    Minimises cross-entropy plus ``lambda_orth * sum_layers orth_penalty(R)``
    with momentum SGD under the cosine schedule.  ``history`` (optional)
    collects per-epoch ``loss`` and mean ``orth`` penalty.
    """
    hyper.validate()
    if not encoder.frozen:
        raise FrozenParameterError("train_first_task expects a frozen encoder")
    if len(task1) == 0:
        raise EmptyInputError("first task has no training samples")
    cfg.validate(encoder.config.depth, encoder.config.dim)
    before = encoder.checksum()

    ivs = init_interventions(cfg, encoder.config.dim)
    classes = np.unique(task1.labels)
    local = np.searchsorted(classes, task1.labels)
    head = LinearHead(encoder.config.dim, len(classes), hyper.seed + 1)
    if head_init == "prototype":
        feats0 = encode(encoder, task1.inputs)
        means = np.stack([feats0[local == k].mean(axis=0) for k in range(len(classes))])
        norms = np.linalg.norm(means, axis=1, keepdims=True)
        head.params["head.w"][...] = head_scale * means / np.where(norms > 0, norms, 1.0) / np.sqrt(encoder.config.dim)

    params = dict(head.params)
    for iv in ivs:
        params[_iv_key(iv.layer, "R")] = iv.R
        params[_iv_key(iv.layer, "W")] = iv.W
        params[_iv_key(iv.layer, "b")] = iv.b
    no_decay = ["head.b"] + [_iv_key(iv.layer, "b") for iv in ivs]
    opt = SGD(params, hyper.momentum, hyper.weight_decay, no_decay=no_decay)
    rng = SeededRng(hyper.seed)
    lam = cfg.lambda_orth
    step = 0
    for epoch in range(hyper.epochs):
        lr = lr_at(hyper, epoch)
        total, count = 0.0, 0
        for idx in minibatches(len(local), hyper.batch, rng):
            feats, tape = forward(encoder, task1.inputs[idx], ivs, cfg.positions)
            loss, dlogits = cross_entropy(head.forward(feats), local[idx])
            loss += lam * sum(orth_penalty(iv.R) for iv in ivs)
            if not np.isfinite(loss):
                raise DivergenceError(step, loss)
            grads, dfeats = head.backward(feats, dlogits)
            for layer, g in backward(tape, dfeats).interventions.items():
                iv = next(v for v in ivs if v.layer == layer)
                grads[_iv_key(layer, "R")] = g["R"] + lam * orth_penalty_grad(iv.R)
                grads[_iv_key(layer, "W")] = g["W"]
                grads[_iv_key(layer, "b")] = g["b"]
            clip_grads(grads, hyper.clip_norm)
            opt.step(grads, lr)
            total += loss * len(idx)
            count += len(idx)
            step += 1
        if history is not None:
            history.setdefault("loss", []).append(total / count)
            history.setdefault("orth", []).append(float(np.mean([orth_penalty(iv.R) for iv in ivs])) if ivs else 0.0)

    if encoder.checksum() != before:
        raise FrozenParameterError("backbone changed during intervention training")
    return [iv.copy() for iv in ivs]


def finetune_first_task(encoder: FrozenEncoder, task1: Dataset, hyper: TrainHyper, history=None) -> FrozenEncoder:
    """Full-finetune baseline: train every encoder weight on task 1, then freeze a copy."""
    enc = encoder.thawed_copy()
    classes = np.unique(task1.labels)
    train_backbone(enc, task1.inputs, np.searchsorted(classes, task1.labels), len(classes), hyper, history)
    return enc.freeze()


# ---------------------------------------------------------------- scenario runs


@dataclass
class RunResult:
    metrics: MetricsTable
    learner: Learner
    trainable_params: int
    history: dict = field(default_factory=dict)


METHODS = ("core", "frozen", "finetune")


def run_scenario(
    encoder: FrozenEncoder,
    cfg: InterventionConfig,
    stream: TaskStream,
    hyper: TrainHyper,
    method: str = "core",
    similarity: str = "cosine",
    k_centers: int = 5,
) -> RunResult:
    """Run the whole protocol on ``stream``.

    ``method`` selects the adaptation on task 1: ``"core"`` trains
    interventions, ``"frozen"`` trains nothing, ``"finetune"`` trains all
    encoder weights.  Every later task only grows the classifiers.
    """
    stream.validate()
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    history: dict = {}
    first = stream.tasks[0].train
    if method == "core":
        ivs = train_first_task(encoder, cfg, first, hyper, history) if cfg.rank > 0 and cfg.layers else []
        model = AdaptedModel(encoder, ivs, cfg.positions)
        trainable = sum(iv.num_params() for iv in ivs)
    elif method == "frozen":
        model = AdaptedModel(encoder)
        trainable = 0
    else:
        history["loss"] = []
        model = AdaptedModel(finetune_first_task(encoder, first, hyper, history["loss"]))
        trainable = encoder.num_params()

    learner = Learner(model, stream.scenario, similarity, k_centers, hyper.seed)
    metrics = MetricsTable()
    for t, task in enumerate(stream.tasks, start=1):
        learner.observe(task)
        last, per_task = evaluate_stage(stream, t, learner)
        metrics.append(last, per_task)
    return RunResult(metrics, learner, trainable, history)


# ---------------------------------------------------------------- checkpoint


def _blob(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def save_experiment(learner: Learner) -> bytes:
    """Serialize encoder, interventions and classifier state (``CORERUN1``).

    Layout: magic; uint64-LE-length-prefixed encoder checkpoint; the same for
    the intervention checkpoint; uint32-LE-length-prefixed JSON header
    describing the classifiers; then their float64-LE arrays in header order.
    """
    m = learner.model
    entries, arrays = [], []

    def add(kind, key, clf, centers=None):
        entries.append({
            "kind": kind, "key": key, "classes": clf.classes, "similarity": clf.similarity,
            "centers": 0 if centers is None else int(centers.shape[0]),
        })
        if len(clf):
            arrays.append(clf.matrix())
        if centers is not None:
            arrays.append(centers)

    add("global", 0, learner.clf)
    for tid in sorted(learner.task_classifiers):
        add("task", tid, learner.task_classifiers[tid])
    for did in sorted(learner.router.domains):
        centers, clf = learner.router.domains[did]
        add("domain", did, clf, centers)
    header = json.dumps({
        "scenario": learner.scenario, "similarity": learner.similarity, "k_centers": learner.k_centers,
        "seed": learner.seed, "dim": m.encoder.config.dim, "classifiers": entries,
    }, sort_keys=True).encode("utf-8")
    parts = [RUN_MAGIC, _blob(save_encoder(m.encoder)), _blob(save_interventions(m.interventions, m.positions)),
             struct.pack("<I", len(header)), header]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def load_experiment(data: bytes) -> Learner:
    data = bytes(data)
    if data[:8] != RUN_MAGIC:
        raise CheckpointVersionError(f"expected magic {RUN_MAGIC!r}, found {data[:8]!r}")
    off = 8

    def take(n):
        nonlocal off
        if len(data) < off + n:
            raise CheckpointTruncatedError("experiment checkpoint truncated")
        chunk = data[off : off + n]
        off += n
        return chunk

    enc = load_encoder(take(struct.unpack("<Q", take(8))[0]))
    ivs, positions = load_interventions(take(struct.unpack("<Q", take(8))[0]))
    header = json.loads(take(struct.unpack("<I", take(4))[0]).decode("utf-8"))
    dim = header["dim"]
    learner = Learner(AdaptedModel(enc, ivs, positions), header["scenario"], header["similarity"],
                      header["k_centers"], header["seed"])

    def read(rows):
        return np.frombuffer(take(rows * dim * 8), dtype="<f8").reshape(rows, dim).astype(np.float64)

    for e in header["classifiers"]:
        clf = PrototypeClassifier(e["similarity"])
        if e["classes"]:
            for c, row in zip(e["classes"], read(len(e["classes"]))):
                clf.prototypes[int(c)] = row
        if e["kind"] == "global":
            learner.clf = clf
        elif e["kind"] == "task":
            learner.task_classifiers[e["key"]] = clf
        else:
            learner.router.register(e["key"], read(e["centers"]), clf)
    if off != len(data):
        raise CheckpointTruncatedError(f"{len(data) - off} trailing bytes in experiment checkpoint")
    return learner
