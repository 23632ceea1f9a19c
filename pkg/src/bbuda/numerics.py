"""Dense math kernel: probability primitives, k-means and gradient checking.

Everything here operates on float64 numpy arrays. Functions that take a
single vector also accept a 2-D array and then work row-wise.
"""
from __future__ import annotations

import zlib
from typing import Callable, Tuple

import numpy as np

EPS = 1e-12


class InvalidInput(ValueError):
    """Raised when an argument violates a shape or value precondition."""


class DegenerateInput(InvalidInput):
    """Raised for inputs where a quantity is undefined (e.g. zero norm)."""


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Independent PRNG stream for ``purpose`` derived from a 64-bit seed.

    Streams with different purposes never overlap, so adding a new consumer
    of randomness does not perturb existing ones.
    """
    key = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))


def _as_float(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.size == 0:
        raise InvalidInput("empty vector")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("non-finite values")
    return a


def softmax(v) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    a = _as_float(v)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    a = _as_float(v)
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats over the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)
    return float(h) if h.ndim == 0 else h


def cross_entropy(target, pred) -> np.ndarray | float:
    """``-sum(target * ln(max(pred, EPS)))`` over the last axis."""
    t = np.asarray(target, dtype=np.float64)
    q = np.asarray(pred, dtype=np.float64)
    if t.shape != q.shape:
        raise InvalidInput(f"length mismatch: {t.shape} vs {q.shape}")
    ce = -np.sum(t * np.log(np.maximum(q, EPS)), axis=-1)
    return float(ce) if ce.ndim == 0 else ce


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput("length mismatch")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInput("zero-norm vector in cosine similarity")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # expanded form, only used to pick the nearest center
    d2 = (points ** 2).sum(1)[:, None] + (centers ** 2).sum(1)[None, :] - 2.0 * points @ centers.T
    return np.maximum(d2, 0.0)


def _objective(points: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> np.ndarray:
    diff = points - centers[assign]
    return np.einsum("nd,nd->n", diff, diff)


def _kmeanspp(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    d2 = _objective(points, points[idx], np.zeros(n, dtype=int))
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a chosen center
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _objective(points, points[nxt:nxt + 1], np.zeros(n, dtype=int)))
    return points[idx].copy()


def kmeans(points, m: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
           return_history: bool = False):
    """Lloyd's algorithm with k-means++ seeding.

    Args:
        points: (N, D) array.
        m: number of clusters, ``m <= N``.
        seed: seed for the k-means PRNG stream.
        max_iter: maximum Lloyd iterations.
        tol: stop once the objective improves by less than this.
        return_history: also return the objective after every iteration.

    Returns:
        ``(centers, assignments)`` or ``(centers, assignments, history)``.

    Empty clusters are re-seeded at the point farthest from its current
    center (lowest index on ties), which keeps the run deterministic.
    """
    X = _as_float(points)
    if X.ndim != 2:
        raise InvalidInput("points must be a 2-D array")
    n = X.shape[0]
    if m < 1 or m > n:
        raise InvalidInput(f"need 1 <= m <= N, got m={m}, N={n}")
    if max_iter < 1:
        raise InvalidInput("max_iter must be >= 1")

    rng = rng_for(seed, "kmeans")
    centers = _kmeanspp(X, m, rng)
    assign = _sq_dists(X, centers).argmin(axis=1)
    per_point = _objective(X, centers, assign)
    obj = float(per_point.sum())
    history = [obj]
    for _ in range(max_iter):
        new_centers = centers.copy()
        counts = np.bincount(assign, minlength=m)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            order = np.argsort(-per_point, kind="stable")
            for c, far in zip(np.flatnonzero(~nonempty), order):
                new_centers[c] = X[far]
        new_assign = _sq_dists(X, new_centers).argmin(axis=1)
        new_per_point = _objective(X, new_centers, new_assign)
        new_obj = float(new_per_point.sum())
        if new_obj > obj:
            # rounding in the mean update at a fixed point; keep the old state
            break
        centers, assign, per_point = new_centers, new_assign, new_per_point
        improvement = obj - new_obj
        obj = new_obj
        history.append(obj)
        if improvement < tol:
            break
    if return_history:
        return centers, assign, history
    return centers, assign


def grad_check(loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]], params,
               h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a flat parameter vector to ``(loss, grad)``. The error
    per coordinate is ``|ga - gfd| / max(1, |ga|, |gfd|)``.
    """
    x = np.array(params, dtype=np.float64).ravel()
    _, ga = loss_fn(x.copy())
    ga = np.asarray(ga, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        gfd = (loss_fn(xp)[0] - loss_fn(xm)[0]) / (2 * h)
        err = abs(ga[i] - gfd) / max(1.0, abs(ga[i]), abs(gfd))
        worst = max(worst, err)
    return worst
