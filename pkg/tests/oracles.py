"""Slow, independent reference implementations used only by the tests."""

import math

import numpy as np


def triple_loop_matmul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def jacobi_singular_values(a, sweeps=60, tol=1e-15):
    """One-sided Jacobi: orthogonalise column pairs by plane rotations."""
    u = np.array(a, dtype=float)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(u[:, p] @ u[:, p])
                beta = float(u[:, q] @ u[:, q])
                gamma = float(u[:, p] @ u[:, q])
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
        if off < tol:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def nearest_mean_predict(means: dict, x):
    """Cosine nearest-prototype classification, ties to the lowest class id."""
    out = []
    ids = sorted(means)
    for row in np.atleast_2d(x):
        best, best_s = None, -math.inf
        rn = math.sqrt(sum(v * v for v in row))
        for c in ids:
            m = means[c]
            mn = math.sqrt(sum(v * v for v in m))
            s = sum(p * q for p, q in zip(row, m)) / ((rn or 1.0) * (mn or 1.0))
            if s > best_s:
                best, best_s = c, s
        out.append(best)
    return np.array(out)


def per_class_mean(x, y):
    sums, counts = {}, {}
    for row, label in zip(x, y):
        label = int(label)
        if label not in sums:
            sums[label] = [0.0] * len(row)
            counts[label] = 0
        sums[label] = [s + v for s, v in zip(sums[label], row)]
        counts[label] += 1
    return {c: np.array(sums[c]) / counts[c] for c in sums}


def nearest_center(centers: dict, x):
    """Index of the domain whose closest center is nearest (squared distance, ties to lowest id)."""
    out = []
    for row in np.atleast_2d(x):
        best, best_d = None, math.inf
        for dom in sorted(centers):
            for c in centers[dom]:
                d = float(np.sum((row - c) ** 2))
                if d < best_d:
                    best, best_d = dom, d
        out.append(best)
    return np.array(out)
