"""Dense linear-algebra and clustering primitives.

Matrices and vectors are plain ``float64`` numpy arrays (2-d and 1-d).  The
helpers here add the shape/finiteness checks the rest of the package relies
on, a seeded generator with a platform-independent stream, power-iteration
spectral norms and a deterministic k-means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ShapeError


def as_matrix(a, name="matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-d float64 array (no copy if already one)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


class SeededRng:
    """Seeded random stream.

    Backed by numpy's PCG64 bit generator, whose output for a given seed is
    identical on every platform numpy supports.  One instance per consumer;
    instances are not meant to be shared between threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed & 0xFFFFFFFFFFFFFFFF))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def spawn(self, tag: int) -> "SeededRng":
        """Derive an independent child stream keyed by ``tag``."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(tag)])
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def frobenius(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def sigma_max(a, max_iters: int = 50, tol: float = 1e-10) -> float:
    """Largest singular value of ``a`` by power iteration.

    Works on whichever Gram matrix (a^T a or a a^T) is smaller; both share
    the nonzero spectrum.  Stops once successive Rayleigh-quotient estimates
    agree to relative tolerance ``tol``.
    """
    a = as_matrix(a, "a")
    if a.size == 0:
        raise EmptyInputError("sigma_max of an empty matrix")
    if max_iters < 1 or tol <= 0:
        raise ValueError("max_iters must be >= 1 and tol > 0")
    gram = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    if not np.any(gram):
        return 0.0
    # iterate on (gram / trace)^8: same top eigenvector, eight times the
    # per-step contraction of the other components, no overflow
    step = gram / np.trace(gram)
    for _ in range(3):
        step = step @ step
    # fixed, dense start vector keeps the result deterministic
    v = np.linspace(1.0, 2.0, gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iters):
        w = step @ v
        norm = np.linalg.norm(w)
        if norm == 0.0 or not np.isfinite(norm):
            # start vector in the null space; restart on a basis vector
            v = np.zeros_like(v)
            v[int(np.argmax(np.diag(gram)))] = 1.0
            step = gram
            continue
        v = w / norm
        new_lam = float(v @ gram @ v)
        if abs(new_lam - lam) <= tol * abs(new_lam):
            lam = new_lam
            break
        lam = new_lam
    return float(np.sqrt(max(lam, 0.0)))


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia_history: list


def _sq_dists(points, centers):
    # |x|^2 - 2 x.c + |c|^2, clipped against round-off
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(points, k, rng):
    n = points.shape[0]
    centers = [points[int(rng.integers(0, n))]]
    closest = _sq_dists(points, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every remaining point coincides with a chosen center
            idx = int(rng.integers(0, n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centers, dtype=np.float64)


def lloyd(points, k: int, seed: int, max_iters: int = 100) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    ``inertia_history[j]`` is the sum of squared distances to the nearest
    center after the j-th assignment step.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[0] == 0:
        raise EmptyInputError("kmeans on an empty point set")
    n = pts.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")

    rng = SeededRng(seed)
    centers = _kmeans_pp(pts, k, rng)
    history = []
    labels = np.zeros(n, dtype=np.int64)
    for it in range(max_iters):
        d = _sq_dists(pts, centers)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if it > 0 and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(centers=centers, labels=labels, inertia_history=history)


def kmeans(points, k: int, seed: int, max_iters: int = 100) -> np.ndarray:
    """Return the ``k`` centers found by :func:`lloyd`, shape ``(k, dim)``."""
    return lloyd(points, k, seed, max_iters).centers
