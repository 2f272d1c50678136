"""Exact t-SNE in two dimensions.

Input affinities are symmetrised Gaussian conditionals with a per-point
bandwidth calibrated to a target perplexity. The map uses the Student-t
kernel

.. math:: q_{ij} = \\frac{(1 + \\lVert y_i - y_j \\rVert^2)^{-1}}
          {\\sum_{k \\ne l} (1 + \\lVert y_k - y_l \\rVert^2)^{-1}}

and plain gradient descent with momentum and per-coordinate gains on

.. math:: \\frac{\\partial C}{\\partial y_i} = 4 \\sum_j (p_{ij} - q_{ij})
          (y_i - y_j) (1 + \\lVert y_i - y_j \\rVert^2)^{-1}.

The optimiser steps along a quarter of this gradient, so a learning rate of
200 means the same step as in the widely used Barnes-Hut code base, which
drops the constant factor.

Everything is O(n^2) and deterministic for a given seed. Every reduction
sorts its terms first, so the result does not depend on the row order and
a permuted input gives the permuted map bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coda import CoordinateMatrix, euclidean_distances
from .errors import DimensionError, NumericalOverflow, PerplexityUnreachable

Q_FLOOR = 1e-12


@dataclass
class AffinityMatrix:
    P: np.ndarray
    perplexity: float
    sigmas: np.ndarray
    entropies: np.ndarray = field(default=None)


@dataclass
class Embedding:
    Y: np.ndarray
    kl: float
    trace: list
    hyper: dict

    def to_dict(self) -> dict:
        return {"Y": self.Y.tolist(), "kl": self.kl,
                "trace": [[int(i), float(v)] for i, v in self.trace], "hyper": dict(self.hyper)}


def _osum(a, axis=None):
    # order-independent sum: the same multiset of terms always adds up the same way
    if axis is None:
        return np.sort(a, axis=None).sum()
    return np.sort(a, axis=axis).sum(axis=axis)


def _row_entropy(d, beta):
    # d is shifted so its minimum is 0; returns (entropy in bits, probabilities)
    w = np.exp(-beta * d)
    total = w.sum()
    p = w / total
    h = beta * (p @ d) + np.log(total)
    return h / np.log(2.0), p


def _calibrate_row(i, d, target, tol, max_steps):
    m = len(d)
    ties = int(np.sum(d == 0))
    if ties == m:
        # every neighbour is equally far: any bandwidth gives the uniform row
        return 0.0, np.full(m, 1.0 / m), np.log2(m)
    if not np.log2(ties) + tol < target < np.log2(m) - tol:
        raise PerplexityUnreachable(i, 2.0 ** target)
    # entropy decreases in beta; bracket log(beta) first, then bisect
    lo, hi = -1.0, 1.0
    while _row_entropy(d, np.exp(lo))[0] < target:
        lo -= 2.0
        if lo < -60:
            raise PerplexityUnreachable(i, 2.0 ** target)
    while _row_entropy(d, np.exp(hi))[0] > target:
        hi += 2.0
        if hi > 60:
            raise PerplexityUnreachable(i, 2.0 ** target)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        h, p = _row_entropy(d, np.exp(mid))
        if abs(h - target) <= tol:
            return np.exp(mid), p, h
        if h > target:
            lo = mid
        else:
            hi = mid
    raise PerplexityUnreachable(i, 2.0 ** target)


def affinities(dist, perplexity: float = 10.0, tol: float = 1e-5, max_steps: int = 50) -> AffinityMatrix:
    """Joint probabilities ``P`` for t-SNE from a distance matrix.

    Each row's squared distances are divided by their mean before the
    bandwidth search, so scaling all distances leaves ``P`` unchanged.

    Parameters
    ----------
    dist : ndarray, shape (n, n)
        Symmetric distances with zero diagonal.
    perplexity : float
        Target perplexity, ``1 < perplexity < n``.
    tol : float
        Allowed deviation of each row entropy from ``log2(perplexity)``.

    Raises
    ------
    PerplexityUnreachable
        If some row cannot reach the target entropy.
    """
    dist = np.asarray(dist, dtype=float)
    n = len(dist)
    if dist.ndim != 2 or dist.shape != (n, n):
        raise DimensionError("distance matrix must be square")
    if not 1 < perplexity < n:
        raise PerplexityUnreachable(-1, perplexity)
    target = np.log2(perplexity)
    cond = np.zeros((n, n))
    sigmas = np.zeros(n)
    entropies = np.zeros(n)
    for i in range(n):
        others = np.arange(n) != i
        d2 = dist[i, others] ** 2
        scale = d2.mean()
        if scale <= 0:
            scale = 1.0
        d = d2 / scale
        d = d - d.min()
        beta, p, h = _calibrate_row(i, d, target, tol, max_steps)
        cond[i, others] = p
        entropies[i] = h
        sigmas[i] = np.sqrt(scale / (2 * beta)) if beta > 0 else np.inf
    P = (cond + cond.T) / (2 * n)
    return AffinityMatrix(P, float(perplexity), sigmas, entropies)


def q_matrix(Y):
    """Student-t map similarities; returns ``(Q, kernel)`` with zero diagonals."""
    Y = np.asarray(Y, dtype=float)
    sq = np.sum(Y * Y, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T, 0.0)
    kernel = 1.0 / (1.0 + d2)
    np.fill_diagonal(kernel, 0.0)
    total = _osum(kernel)
    if not np.isfinite(total) or total <= 0:
        raise NumericalOverflow("the map similarity normaliser is not positive and finite")
    return kernel / total, kernel


def kl_divergence(P, Y) -> float:
    """``sum P log(P / Q)`` over the positive entries of ``P``."""
    P = P.P if isinstance(P, AffinityMatrix) else np.asarray(P, dtype=float)
    Q, _ = q_matrix(Y)
    pos = P > 0
    return float(_osum(P[pos] * np.log(P[pos] / np.maximum(Q[pos], Q_FLOOR))))


def gradient(P, Y) -> np.ndarray:
    """Exact gradient of the KL divergence with respect to ``Y``."""
    P = P.P if isinstance(P, AffinityMatrix) else np.asarray(P, dtype=float)
    Q, kernel = q_matrix(Y)
    W = (P - Q) * kernel
    diff = Y[:, None, :] - Y[None, :, :]
    return 4.0 * _osum(W[:, :, None] * diff, axis=1)


def embed(P, seed: int = 0, *, n_iter: int = 1000, learning_rate: float = 200.0,
          exaggeration: float = 12.0, exaggeration_iters: int = 250,
          momentum: tuple = (0.5, 0.8), momentum_switch: int = 250, init=None,
          log_every: int = 50, callback=None) -> Embedding:
    """Minimise the KL divergence between ``P`` and the map similarities.

    Parameters
    ----------
    P : AffinityMatrix or ndarray
    seed : int
        Seeds the Gaussian start (standard deviation ``1e-4``) when ``init``
        is not given.
    init : ndarray, shape (n, 2), optional
        Starting map.
    callback : callable, optional
        Called as ``callback(iteration, Y, Q)`` after every update.

    Returns
    -------
    Embedding
        ``trace`` holds ``(iteration, KL)`` pairs every ``log_every``
        iterations, KL measured against the unexaggerated ``P``.
    """
    perplexity = P.perplexity if isinstance(P, AffinityMatrix) else None
    P = P.P if isinstance(P, AffinityMatrix) else np.asarray(P, dtype=float)
    n = len(P)
    if init is None:
        Y = np.random.default_rng(seed).normal(scale=1e-4, size=(n, 2))
    else:
        Y = np.array(init, dtype=float)
        if Y.shape != (n, 2):
            raise DimensionError(f"init must have shape ({n}, 2)")
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = []
    for it in range(1, n_iter + 1):
        scale = exaggeration if it <= exaggeration_iters else 1.0
        mom = momentum[0] if it <= momentum_switch else momentum[1]
        grad = 0.25 * gradient(scale * P, Y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - _osum(Y, axis=0) / n
        if not np.all(np.isfinite(Y)):
            raise NumericalOverflow(f"non-finite map coordinates at iteration {it}")
        if callback is not None:
            callback(it, Y, q_matrix(Y)[0])
        if it == 1 or it % log_every == 0 or it == n_iter:
            trace.append((it, kl_divergence(P, Y)))
    hyper = {"perplexity": perplexity, "learning_rate": learning_rate, "n_iter": n_iter,
             "exaggeration": exaggeration, "exaggeration_iters": exaggeration_iters,
             "momentum": list(momentum), "momentum_switch": momentum_switch, "seed": seed}
    return Embedding(Y, trace[-1][1], trace, hyper)


def tsne(coords, perplexity: float = 10.0, seed: int = 0, **kwargs) -> Embedding:
    """Embed ilr coordinates; Euclidean distance there is the Aitchison distance."""
    values = coords.values if isinstance(coords, CoordinateMatrix) else coords
    return embed(affinities(euclidean_distances(values), perplexity), seed, **kwargs)
