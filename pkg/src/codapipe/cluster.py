"""Clustering of entities (R-mode) and of components (Q-mode).

R-mode works on ilr coordinates, unscaled, with Euclidean distance (which is
the Aitchison distance between the underlying compositions). Q-mode takes a
variation matrix and clusters the components with Ward linkage, treating the
log-ratio variances as squared dissimilarities.

Trees from both directions share one representation: a linkage matrix in
the usual ``(n - 1) x 4`` layout ``[left, right, height, size]`` where ids
``>= n`` refer to the cluster formed at row ``id - n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .coda import CoordinateMatrix, VariationMatrix, euclidean_distances
from .errors import DimensionError

log = logging.getLogger(__name__)


def _coords(coords) -> np.ndarray:
    values = coords.values if isinstance(coords, CoordinateMatrix) else coords
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise DimensionError("coordinates must be a 2-D array")
    return values


def relabel(labels) -> np.ndarray:
    """Map arbitrary ids to ``1..K`` in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=int)
    rank[np.argsort(first)] = np.arange(1, len(first) + 1)
    return rank[inverse.ravel()]


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    K: int
    method: str
    objective: float
    trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        used = np.unique(self.labels)
        if not np.array_equal(used, np.arange(1, self.K + 1)):
            raise ValueError(f"labels must use every id in 1..{self.K}, got {used.tolist()}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "K": int(self.K),
            "objective": float(self.objective),
            "labels": self.labels.tolist(),
            "notes": list(self.notes),
        }


# --------------------------------------------------------------------------- k-means


def within_ss(x, labels) -> float:
    """Within-cluster sum of squared distances to the cluster means."""
    x = _coords(x)
    labels = np.asarray(labels)
    total = 0.0
    for g in np.unique(labels):
        part = x[labels == g]
        total += float(np.sum((part - part.mean(axis=0)) ** 2))
    return total


def _sq_dists(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ikd,ikd->ik", diff, diff)


def kmeans_plus_plus(x, K, rng) -> np.ndarray:
    """k-means++ seeding; returns row indices of the chosen centres."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a centre
            nxt = int(np.setdiff1d(np.arange(n), chosen)[0])
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return np.asarray(chosen)


def _lloyd(x, centers, max_iter):
    K = len(centers)
    trace, notes = [], []
    labels = None
    for _ in range(max_iter):
        # argmin keeps the lowest index on exact ties
        new = np.argmin(_sq_dists(x, centers), axis=1)
        counts = np.bincount(new, minlength=K)
        for g in np.flatnonzero(counts == 0):
            own = np.sum((x - centers[new]) ** 2, axis=1)
            donors = counts[new] > 1
            far = int(np.flatnonzero(donors)[np.argmax(own[donors])])
            notes.append(f"empty cluster {g + 1} re-seeded with point {far}")
            new[far] = g
            counts = np.bincount(new, minlength=K)
        centers = np.array([x[new == g].mean(axis=0) for g in range(K)])
        trace.append(float(np.sum((x - centers[new]) ** 2)))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return new, centers, trace, notes


def kmeans(coords, K: int, restarts: int = 50, seed: int = 0, max_iter: int = 300) -> ClusterAssignment:
    """Best-of-restarts Lloyd k-means from k-means++ starts.

    Parameters
    ----------
    coords : CoordinateMatrix or array_like, shape (n, d)
        Used as given; no scaling is applied.
    K : int
        Number of clusters, ``2 <= K <= n`` (``K = 1`` is accepted too).
    restarts : int
        Independent starts; the lowest WSS wins, earliest start on ties.
    seed : int

    Returns
    -------
    ClusterAssignment
        Labels in ``1..K`` ordered by first appearance. ``trace`` holds the
        WSS after every Lloyd iteration of the winning start.
    """
    x = _coords(coords)
    n = len(x)
    if not 1 <= K <= n:
        raise DimensionError(f"K must lie in [1, {n}], got {K}")
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        centers = x[kmeans_plus_plus(x, K, rng)]
        labels, centers, trace, notes = _lloyd(x, centers, max_iter)
        if best is None or trace[-1] < best[2][-1]:
            best = (labels, centers, trace, notes)
    labels, centers, trace, notes = best
    out = relabel(labels)
    order = [int(labels[np.flatnonzero(out == g)[0]]) for g in range(1, K + 1)]
    return ClusterAssignment(out, K, "kmeans", trace[-1], trace, notes,
                             {"centers": centers[order]})


# --------------------------------------------------------------------------- diagnostics


def silhouette_samples(dist, labels) -> np.ndarray:
    """Silhouette width of every point from a precomputed distance matrix.

    Points in singleton clusters get 0.
    """
    dist = np.asarray(dist, dtype=float)
    labels = np.asarray(labels)
    groups = np.unique(labels)
    n = len(labels)
    if len(groups) < 2:
        raise ValueError("silhouette needs at least two clusters")
    sums = np.column_stack([dist[:, labels == g].sum(axis=1) for g in groups])
    sizes = np.array([(labels == g).sum() for g in groups])
    own = np.searchsorted(groups, labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes
    other[np.arange(n), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own_size > 1, s, 0.0)


def silhouette_score(dist, labels) -> float:
    return float(np.mean(silhouette_samples(dist, labels)))


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected agreement between two partitions."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("partitions must have the same length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def pairs(v):
        return float(np.sum(v * (v - 1) / 2))

    n = len(a)
    index = pairs(table)
    rows, cols = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = rows * cols / total if total else 0.0
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return (index - expected) / (top - expected)


@dataclass
class DiagnosticsCurve:
    ks: list
    wss: list
    silhouette: list

    @property
    def best_k(self) -> int:
        return int(self.ks[int(np.argmax(self.silhouette))])

    def to_dict(self) -> dict:
        return {"K": list(self.ks), "wss": list(self.wss), "silhouette": list(self.silhouette),
                "best_silhouette_K": self.best_k}


def diagnostics(coords, k_range, seed: int = 0, restarts: int = 50) -> DiagnosticsCurve:
    """Elbow and silhouette curves for k-means over ``k_range``."""
    x = _coords(coords)
    n = len(x)
    ks = [int(k) for k in k_range]
    if any(k < 2 or k > n - 1 for k in ks):
        raise DimensionError(f"K values must lie in [2, {n - 1}]")
    dist = euclidean_distances(x)
    wss, sil = [], []
    for k in ks:
        fit = kmeans(x, k, restarts=restarts, seed=seed)
        wss.append(fit.objective)
        sil.append(silhouette_score(dist, fit.labels))
    return DiagnosticsCurve(ks, wss, sil)


# --------------------------------------------------------------------------- trees


@dataclass
class Dendrogram:
    """Binary tree stored as a linkage matrix.

    Attributes
    ----------
    linkage : ndarray, shape (n - 1, 4)
        Rows ``[left, right, height, size]`` in merge order.
    labels : tuple
        Leaf labels.
    method : str
    """

    linkage: np.ndarray
    labels: tuple
    method: str

    def __post_init__(self):
        self.linkage = np.asarray(self.linkage, dtype=float).reshape(-1, 4)
        self.labels = tuple(self.labels)
        if len(self.linkage) != len(self.labels) - 1:
            raise ValueError("a tree over n leaves needs n - 1 merges")

    @property
    def n_leaves(self) -> int:
        return len(self.labels)

    @property
    def heights(self) -> np.ndarray:
        return self.linkage[:, 2]

    def members(self, node: int) -> frozenset:
        n = self.n_leaves
        if node < n:
            return frozenset([node])
        left, right = self.linkage[node - n, :2].astype(int)
        return self.members(left) | self.members(right)

    def clusters(self) -> set:
        """Leaf sets of all internal nodes, a topology fingerprint."""
        n = self.n_leaves
        return {self.members(n + i) for i in range(n - 1)}

    def cut(self, K: int) -> np.ndarray:
        """Labels ``1..K`` from undoing the last ``K - 1`` merges."""
        n = self.n_leaves
        if not 1 <= K <= n:
            raise DimensionError(f"K must lie in [1, {n}]")
        parent = np.arange(2 * n - 1)
        for i, (a, b) in enumerate(self.linkage[: n - K, :2].astype(int)):
            parent[a] = parent[b] = n + i

        def root(v):
            while parent[v] != v:
                v = parent[v]
            return v

        return relabel([root(i) for i in range(n)])

    def groups(self, K: int) -> list:
        labels = self.cut(K)
        return [tuple(self.labels[i] for i in np.flatnonzero(labels == g)) for g in range(1, K + 1)]

    def leaf_order(self) -> list:
        n = self.n_leaves

        def walk(node):
            if node < n:
                return [node]
            left, right = self.linkage[node - n, :2].astype(int)
            return walk(left) + walk(right)

        return walk(2 * n - 2) if n > 1 else [0]

    def to_dict(self) -> dict:
        return {"method": self.method, "labels": list(self.labels),
                "linkage": self.linkage.tolist()}


def _check_dissimilarity(d, name="dissimilarity"):
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionError(f"{name} matrix must be square")
    if not np.allclose(d, d.T, rtol=1e-12, atol=1e-14) or np.any(np.diag(d) != 0):
        raise ValueError(f"{name} matrix must be symmetric with zero diagonal")
    return d


def divisive_hierarchical(dist, labels=None) -> Dendrogram:
    """Divisive analysis (DIANA).

    The cluster with the largest diameter is split by starting a splinter
    group from its member with the largest mean dissimilarity to the rest,
    then moving over every member that is on average closer to the
    splinter group, one at a time, largest difference first. Splits are
    recorded at the diameter of the parent cluster.
    """
    d = _check_dissimilarity(dist, "distance")
    n = len(d)
    labels = tuple(range(n)) if labels is None else tuple(labels)
    splits = []
    active = [list(range(n))]
    while True:
        sizable = [c for c in active if len(c) > 1]
        if not sizable:
            break
        diam = [d[np.ix_(c, c)].max() for c in sizable]
        target = sizable[int(np.argmax(diam))]
        active.remove(target)
        rest = list(target)
        sub = d[np.ix_(rest, rest)]
        first = int(np.argmax(sub.sum(axis=1) / (len(rest) - 1)))
        splinter = [rest.pop(first)]
        while len(rest) > 1:
            to_rest = np.array([d[i, [j for j in rest if j != i]].mean() for i in rest])
            to_splinter = np.array([d[i, splinter].mean() for i in rest])
            gain = to_rest - to_splinter
            k = int(np.argmax(gain))
            if gain[k] <= 0:
                break
            splinter.append(rest.pop(k))
        splits.append((max(diam), sorted(splinter), sorted(rest)))
        active += [sorted(splinter), sorted(rest)]
    return Dendrogram(_splits_to_linkage(splits, n), labels, "diana")


def _splits_to_linkage(splits, n):
    # replay the splits bottom-up: smallest diameter merges first
    node_of = {frozenset([i]): i for i in range(n)}
    rows = []
    order = sorted(range(len(splits)), key=lambda s: (splits[s][0], -s))
    for s in order:
        height, a, b = splits[s]
        ka, kb = node_of[frozenset(a)], node_of[frozenset(b)]
        rows.append([min(ka, kb), max(ka, kb), height, len(a) + len(b)])
        node_of[frozenset(a) | frozenset(b)] = n + len(rows) - 1
    return np.array(rows, dtype=float).reshape(-1, 4)


def ward_linkage(sq_dissimilarity, labels=None) -> Dendrogram:
    """Agglomerative Ward linkage on squared dissimilarities.

    Uses the Lance-Williams update

    .. math:: d(k, i \\cup j) = \\frac{(n_k + n_i) d(k, i) + (n_k + n_j) d(k, j) - n_k d(i, j)}
              {n_k + n_i + n_j}

    and records merge heights on the squared scale. Exact ties merge the
    pair with the lowest indices.
    """
    d = _check_dissimilarity(sq_dissimilarity).copy()
    n = len(d)
    labels = tuple(range(n)) if labels is None else tuple(labels)
    size = {i: 1 for i in range(n)}
    node = list(range(n))
    alive = list(range(n))
    rows = []
    for step in range(n - 1):
        sub = d[np.ix_(alive, alive)]
        iu = np.triu_indices(len(alive), 1)
        k = int(np.argmin(sub[iu]))
        a, b = alive[iu[0][k]], alive[iu[1][k]]
        h = d[a, b]
        na, nb = size[a], size[b]
        for c in alive:
            if c in (a, b):
                continue
            nc = size[c]
            new = ((nc + na) * d[c, a] + (nc + nb) * d[c, b] - nc * h) / (nc + na + nb)
            d[a, c] = d[c, a] = new
        rows.append([min(node[a], node[b]), max(node[a], node[b]), h, na + nb])
        size[a] = na + nb
        node[a] = n + step
        alive.remove(b)
    return Dendrogram(np.array(rows, dtype=float).reshape(-1, 4), labels, "ward")


def qmode_ward(varmat) -> Dendrogram:
    """Ward tree of the components from a variation matrix."""
    if isinstance(varmat, VariationMatrix):
        return ward_linkage(varmat.t, varmat.labels or None)
    return ward_linkage(varmat)


# --------------------------------------------------------------------------- mixtures


def _log_gauss(x, mean, cov):
    dim = x.shape[1]
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, (x - mean).T)
    return (-0.5 * np.sum(sol * sol, axis=0) - np.log(np.diag(chol)).sum()
            - 0.5 * dim * np.log(2 * np.pi))


def _m_step(x, resp, diagonal):
    nk = resp.sum(axis=0)
    weights = nk / len(x)
    means = (resp.T @ x) / nk[:, None]
    covs = []
    for k in range(resp.shape[1]):
        diff = x - means[k]
        cov = (resp[:, k, None] * diff).T @ diff / nk[k]
        covs.append(np.diag(np.diag(cov)) if diagonal else 0.5 * (cov + cov.T))
    return weights, means, np.array(covs)


def _stabilise(covs, notes, it, ridge):
    """Add the fixed ridge to every covariance and note collapsed ones."""
    dim = covs.shape[1]
    for k, cov in enumerate(covs):
        scale = np.trace(cov) / dim
        if scale <= 0 or np.linalg.eigvalsh(cov)[0] <= 1e-10 * scale:
            notes.append(f"iteration {it}: component {k + 1} covariance collapsed")
    return covs + ridge * np.eye(dim)


def gmm_em(coords, K: int, seed: int = 0, *, max_iter: int = 500, tol: float = 1e-8,
           covariance: str = "full") -> ClusterAssignment:
    """Gaussian mixture fitted by EM.

    Responsibilities start as hard assignments to k-means++ centres.
    With fewer than ``2 * dim * K`` rows the covariances are restricted to
    diagonal matrices. Every covariance carries a fixed ridge of ``1e-6``
    times the mean coordinate variance, so a component that shrinks onto a
    few points stays invertible and the log-likelihood stays bounded; such
    collapses are noted. Labels are the maximum-posterior component,
    renumbered ``1..K'`` over the components that receive points.

    Returns
    -------
    ClusterAssignment
        ``objective`` is the final log-likelihood and ``trace`` the
        log-likelihood after every iteration. ``params`` holds weights,
        means, covariances, the covariance model and BIC.
    """
    x = _coords(coords)
    n, dim = x.shape
    if not 1 <= K <= n:
        raise DimensionError(f"K must lie in [1, {n}], got {K}")
    notes = []
    diagonal = covariance == "diag"
    if not diagonal and n < 2 * dim * K:
        diagonal = True
        notes.append(f"n={n} < 2*dim*K={2 * dim * K}: diagonal covariances used")
    rng = np.random.default_rng(seed)
    centers = x[kmeans_plus_plus(x, K, rng)]
    hard = np.argmin(_sq_dists(x, centers), axis=1)
    resp = np.eye(K)[hard]
    # keep every component alive at the start
    resp = np.clip(resp, 1e-10, None)
    resp /= resp.sum(axis=1, keepdims=True)
    ridge = 1e-6 * (float(np.var(x, axis=0).mean()) or 1.0)
    trace = []
    for it in range(1, max_iter + 1):
        weights, means, covs = _m_step(x, resp, diagonal)
        covs = _stabilise(covs, notes, it, ridge)
        logp = np.column_stack([np.log(weights[k]) + _log_gauss(x, means[k], covs[k])
                                for k in range(K)])
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        resp = np.exp(logp - norm[:, None])
        if it > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
    labels = relabel(np.argmax(resp, axis=1))
    used = len(np.unique(labels))
    if used < K:
        notes.append(f"only {used} of {K} components own points")
    per_comp = dim if diagonal else dim * (dim + 1) // 2
    n_params = (K - 1) + K * dim + K * per_comp
    params = {
        "weights": weights, "means": means, "covariances": covs,
        "covariance_model": "diag" if diagonal else "full",
        "bic": -2 * trace[-1] + n_params * np.log(n),
        "responsibilities": resp,
    }
    return ClusterAssignment(labels, used, "gmm", trace[-1], trace, notes, params)
