"""Optimisation helpers shared by pretraining and first-task finetuning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import SeededRng


@dataclass
class TrainHyper:
    lr: float = 0.05
    weight_decay: float = 5e-4
    batch: int = 48
    epochs: int = 20
    schedule: str = "cosine"
    momentum: float = 0.9
    lambda_orth: float = 1.0
    seed: int = 1993
    # global gradient-norm ceiling; None or 0 disables clipping
    clip_norm: float | None = 5.0

    def validate(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.weight_decay < 0 or self.momentum < 0 or self.lambda_orth < 0:
            raise ValueError("weight_decay, momentum and lambda_orth must be >= 0")


def clip_grads(grads: dict, max_norm) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def lr_at(hyper: TrainHyper, epoch: int) -> float:
    """Learning rate for ``epoch`` (0-based) under the configured schedule."""
    if hyper.schedule == "constant":
        return hyper.lr
    return 0.5 * hyper.lr * (1.0 + math.cos(math.pi * epoch / hyper.epochs))


class SGD:
    """Momentum SGD with L2 weight decay, updating arrays in place.

    Update rule per parameter: ``g += wd * p; buf = m * buf + g; p -= lr * buf``.
    """

    def __init__(self, params: dict, momentum=0.9, weight_decay=0.0, no_decay=()):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.buffers = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float):
        for name, g in grads.items():
            p = self.params[name]
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p -= lr * buf


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sums = expz.sum(axis=1, keepdims=True)
    probs = expz / sums
    n = logits.shape[0]
    loss = float(np.mean(np.log(sums[:, 0]) - z[np.arange(n), labels]))
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class LinearHead:
    """Temporary linear classifier ``logits = F W^T + b``."""

    def __init__(self, dim, num_classes, seed):
        rng = SeededRng(seed)
        self.params = {
            "head.w": rng.normal(size=(num_classes, dim), scale=1.0 / math.sqrt(dim)),
            "head.b": np.zeros(num_classes),
        }

    def forward(self, feats):
        return feats @ self.params["head.w"].T + self.params["head.b"]

    def backward(self, feats, dlogits):
        grads = {"head.w": dlogits.T @ feats, "head.b": dlogits.sum(axis=0)}
        return grads, dlogits @ self.params["head.w"]


def minibatches(n, batch, rng: SeededRng):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        yield order[start : start + batch]
