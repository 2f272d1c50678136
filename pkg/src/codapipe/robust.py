"""Robust estimation: FAST-MCD, least trimmed squares, robust variation matrix.

Both FAST-MCD and LTS follow the same search: random elemental starts,
two concentration steps (C-steps) per start, then the best ``n_keep``
candidates iterated to convergence. Candidate evaluation is vectorised
over starts, so results depend only on ``(data, seed)``.

When the number of ``h``-subsets is small (``C(n, h) <= 50_000``) the search
is replaced by full enumeration and the global optimum is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .coda import VariationMatrix, _table_values
from .errors import DegenerateDesign, DimensionError, InsufficientRows, SingularSubset

EXHAUSTIVE_LIMIT = 50_000
_SINGULAR_LOGDET = -700.0
# smallest |R_kk| / largest |R_kk| of a design block treated as full rank
_RANK_TOL = 1e-10


@dataclass
class RobustEstimate:
    location: np.ndarray
    covariance: np.ndarray
    subset: np.ndarray
    h: int
    consistency_factor: float
    determinant: float
    raw_covariance: np.ndarray
    exhaustive: bool = False
    det_trace: list = field(default_factory=list)

    def mahalanobis(self, data) -> np.ndarray:
        """Squared robust distances of ``data`` rows to the MCD fit."""
        diff = np.atleast_2d(np.asarray(data, dtype=float)) - self.location
        sol = np.linalg.solve(self.covariance, diff.T).T
        return np.sum(diff * sol, axis=1)


@dataclass
class LtsFit:
    coefficients: np.ndarray
    trimmed_indices: np.ndarray
    trim_fraction: float
    h: int
    objective: float
    exhaustive: bool = False

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.coefficients[0] + X @ self.coefficients[1:]


def default_h(n: int, p: int) -> int:
    """``ceil(0.75 n)``, raised to the breakdown lower bound if needed."""
    return min(n, max(math.ceil(0.75 * n), (n + p + 2) // 2))


def consistency_factor(h: int, n: int, p: int) -> float:
    """Normal-consistency factor ``alpha / F_{chi2(p+2)}(q_alpha)``, ``alpha = h/n``."""
    alpha = h / n
    if alpha >= 1.0:
        return 1.0
    q = stats.chi2.ppf(alpha, p)
    return float(alpha / stats.chi2.cdf(q, p + 2))


def _batch_stats(data, subsets):
    pts = data[subsets]
    means = pts.mean(axis=1)
    centered = pts - means[:, None, :]
    covs = np.swapaxes(centered, 1, 2) @ centered / (subsets.shape[1] - 1)
    sign, logdet = np.linalg.slogdet(covs)
    logdet = np.where((sign > 0) & (logdet > _SINGULAR_LOGDET), logdet, -np.inf)
    return means, covs, logdet


def _batch_concentrate(data, means, covs, h):
    diff = data[None, :, :] - means[:, None, :]
    sol = np.linalg.solve(covs, np.swapaxes(diff, 1, 2))
    d2 = np.einsum("mni,min->mn", diff, sol)
    order = np.argsort(d2, axis=1, kind="stable")[:, :h]
    return np.sort(order, axis=1)


def c_step(data, subset, h=None):
    """One concentration step.

    Returns the new subset (the ``h`` points closest to the current subset
    fit in Mahalanobis distance) together with the determinants of the
    subset covariance before and after the step.
    """
    data = np.asarray(data, dtype=float)
    subset = np.sort(np.asarray(subset))
    h = len(subset) if h is None else h
    means, covs, logdet = _batch_stats(data, subset[None, :])
    if not np.isfinite(logdet[0]):
        raise SingularSubset("subset covariance is singular")
    new = _batch_concentrate(data, means, covs, h)
    _, _, new_logdet = _batch_stats(data, new)
    return new[0], float(np.exp(logdet[0])), float(np.exp(new_logdet[0]))


def mcd_univariate(x, h: int):
    """Exact univariate MCD: the ``h`` contiguous order statistics of least variance.

    Returns ``(location, raw_variance, subset_indices)``. A zero variance is
    a legitimate exact fit and is returned as is.
    """
    x = np.asarray(x, dtype=float).ravel()
    order = np.argsort(x, kind="stable")
    windows = sliding_window_view(x[order], h)
    variances = windows.var(axis=1, ddof=1)
    best = int(np.argmin(variances))
    subset = np.sort(order[best:best + h])
    return float(windows[best].mean()), float(variances[best]), subset


def _elemental_subsets(rng, n, size, n_starts):
    perms = np.argsort(rng.random((n_starts, n)), axis=1)
    return perms, perms[:, :size]


def _refine(data, subset, h, logdet, tol, max_steps):
    trace = [logdet]
    for _ in range(max_steps):
        means, covs, cur = _batch_stats(data, subset[None, :])
        if not np.isfinite(cur[0]):
            break
        new = _batch_concentrate(data, means, covs, h)[0]
        _, _, new_logdet = _batch_stats(data, new[None, :])
        if np.array_equal(new, subset):
            break
        if new_logdet[0] > cur[0]:
            break
        subset = new
        trace.append(float(new_logdet[0]))
        if abs(np.exp(cur[0]) - np.exp(new_logdet[0])) < tol:
            break
    return subset, trace


def _mcd_search(data, h, seed, n_starts, n_csteps, n_keep, tol, max_steps):
    n, p = data.shape
    rng = np.random.default_rng(seed)
    perms, starts = _elemental_subsets(rng, n, p + 1, n_starts)
    means, covs, logdet = _batch_stats(data, starts)
    singular = np.flatnonzero(~np.isfinite(logdet))
    for m in singular:
        # grow the elemental set along its permutation until nonsingular
        for size in range(p + 2, n + 1):
            mu, cv, ld = _batch_stats(data, perms[m:m + 1, :size])
            if np.isfinite(ld[0]):
                means[m], covs[m], logdet[m] = mu[0], cv[0], ld[0]
                break
    ok = np.isfinite(logdet)
    if not ok.any():
        raise SingularSubset("every elemental start has a singular covariance")
    subsets = _batch_concentrate(data, means[ok], covs[ok], h)
    traces = [[] for _ in range(len(subsets))]
    for _ in range(n_csteps):
        means, covs, logdet = _batch_stats(data, subsets)
        for t, ld in zip(traces, logdet):
            t.append(float(ld))
        finite = np.isfinite(logdet)
        if not finite.any():
            raise SingularSubset("every candidate subset covariance is singular")
        subsets, logdet = subsets[finite], logdet[finite]
        traces = [t for t, f in zip(traces, finite) if f]
        subsets = _batch_concentrate(data, means[finite], covs[finite], h)
    _, _, logdet = _batch_stats(data, subsets)
    for t, ld in zip(traces, logdet):
        t.append(float(ld))

    order = np.argsort(logdet, kind="stable")
    seen = set()
    best = None
    for idx in order:
        if len(seen) >= n_keep:
            break
        key = subsets[idx].tobytes()
        if key in seen or not np.isfinite(logdet[idx]):
            continue
        seen.add(key)
        refined, trace = _refine(data, subsets[idx], h, float(logdet[idx]), tol, max_steps)
        final = trace[-1]
        if best is None or final < best[1]:
            best = (refined, final, traces[idx][:-1] + trace)
    if best is None:
        raise SingularSubset("every candidate subset covariance is singular")
    return best


def _mcd_exhaustive(data, h):
    n = data.shape[0]
    subsets = np.array(list(combinations(range(n), h)), dtype=np.intp)
    _, _, logdet = _batch_stats(data, subsets)
    if not np.isfinite(logdet).any():
        raise SingularSubset("every h-subset covariance is singular")
    best = int(np.argmin(logdet))
    return subsets[best], float(logdet[best]), [float(logdet[best])]


def fast_mcd(data, h=None, seed=0, *, n_starts=500, n_csteps=2, n_keep=10,
             exhaustive=None, tol=1e-12, max_steps=100) -> RobustEstimate:
    """Minimum covariance determinant estimate of location and scatter.

    Parameters
    ----------
    data : array_like, shape (n, p)
    h : int, optional
        Subset size, within ``[(n + p + 1) / 2, n]``. Defaults to
        ``ceil(0.75 n)``.
    seed : int
        Seed for the random elemental starts.
    exhaustive : bool, optional
        Force (True) or forbid (False) full enumeration of all h-subsets.
        By default enumeration is used when there are at most 50 000 subsets.
        Univariate data always uses the exact sorted-window algorithm.

    Returns
    -------
    RobustEstimate
        ``location`` is the subset mean, ``covariance`` the subset sample
        covariance times the consistency factor, ``determinant`` the
        determinant of the unscaled subset covariance.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n, p = data.shape
    if n <= p:
        raise DimensionError(f"MCD needs n > p, got n={n}, p={p}")
    h = default_h(n, p) if h is None else int(h)
    if not (n + p + 1) / 2 <= h <= n:
        raise DimensionError(f"h={h} outside [{(n + p + 1) / 2}, {n}]")

    if p == 1:
        _, var, subset = mcd_univariate(data[:, 0], h)
        if var <= 0:
            raise SingularSubset("more than h identical values: zero scale")
        logdet, trace, used_exhaustive = math.log(var), [math.log(var)], True
    else:
        if exhaustive is None:
            exhaustive = math.comb(n, h) <= EXHAUSTIVE_LIMIT
        if exhaustive:
            subset, logdet, trace = _mcd_exhaustive(data, h)
        else:
            subset, logdet, trace = _mcd_search(data, h, seed, n_starts, n_csteps,
                                                n_keep, tol, max_steps)
        used_exhaustive = bool(exhaustive)

    pts = data[subset]
    location = pts.mean(axis=0)
    raw = np.atleast_2d(np.cov(pts, rowvar=False, ddof=1))
    raw = 0.5 * (raw + raw.T)
    c = consistency_factor(h, n, p)
    return RobustEstimate(
        location=location,
        covariance=c * raw,
        subset=np.sort(subset),
        h=h,
        consistency_factor=c,
        determinant=float(np.exp(logdet)),
        raw_covariance=raw,
        exhaustive=used_exhaustive,
        det_trace=[float(np.exp(v)) for v in trace],
    )


def _design(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(len(X)), X])


def _batch_ols(A, y, subsets):
    """Least-squares fits on many row subsets at once; NaN rows mark rank deficiency."""
    Q, R = np.linalg.qr(A[subsets])
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    good = diag.min(axis=1) > _RANK_TOL * np.maximum(diag.max(axis=1), 1e-300)
    coefs = np.full((len(subsets), A.shape[1]), np.nan)
    if good.any():
        qty = (np.swapaxes(Q[good], 1, 2) @ y[subsets][good][..., None])
        coefs[good] = np.linalg.solve(R[good], qty)[..., 0]
    return coefs


def _trimmed_objective(A, y, coefs, h):
    res2 = (y[None, :] - coefs @ A.T) ** 2
    order = np.argsort(res2, axis=1, kind="stable")[:, :h]
    obj = np.take_along_axis(res2, order, axis=1).sum(axis=1)
    return np.sort(order, axis=1), obj


def _lts_refine(A, y, subset, h, max_steps):
    cur, cur_obj = subset[None, :], np.inf
    for _ in range(max_steps):
        c = _batch_ols(A, y, cur)
        if not np.isfinite(c).all():
            break
        new, new_obj = _trimmed_objective(A, y, c, h)
        if np.array_equal(new, cur) or new_obj[0] > cur_obj:
            cur_obj = min(cur_obj, new_obj[0])
            break
        cur, cur_obj = new, new_obj[0]
    return cur[0], cur_obj


def lts_regression(X, y, trim_fraction=0.25, seed=0, *, n_starts=500, n_csteps=2,
                   n_keep=10, exhaustive=None, max_steps=100, init_subset=None) -> LtsFit:
    """Least trimmed squares regression with an intercept.

    Minimises the sum of the ``h = floor(n (1 - trim_fraction))`` smallest
    squared residuals. Coefficients are ``[intercept, slope_1, ..., slope_q]``.
    ``init_subset`` skips the random starts and concentrates from the given
    retained set, which is how a previous fit is warm-started.

    Raises
    ------
    DegenerateDesign
        If the retained design block is rank-deficient.
    """
    A = _design(X)
    y = np.asarray(y, dtype=float).ravel()
    n, k = A.shape
    if len(y) != n:
        raise DimensionError("X and y have different row counts")
    if not 0.0 <= trim_fraction <= 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5]")
    if n < k + 1:
        raise DimensionError(f"LTS needs n >= q + 2, got n={n}, q={k - 1}")
    h = int(math.floor(n * (1.0 - trim_fraction) + 1e-9))
    if h < k:
        raise DimensionError(f"retained count {h} is below q + 1 = {k}")

    if init_subset is not None:
        init = np.sort(np.asarray(init_subset, dtype=np.intp))
        if len(init) != h:
            raise DimensionError(f"init_subset has {len(init)} rows, expected {h}")
        best_subset, _ = _lts_refine(A, y, init, h, max_steps)
        exhaustive = False
    else:
        if exhaustive is None:
            exhaustive = math.comb(n, h) <= EXHAUSTIVE_LIMIT
        if exhaustive:
            subsets = np.array(list(combinations(range(n), h)), dtype=np.intp)
            coefs = _batch_ols(A, y, subsets)
            ok = np.isfinite(coefs).all(axis=1)
            if not ok.any():
                raise DegenerateDesign("every retained design block is rank-deficient")
            res = y[subsets] - np.einsum("mhk,mk->mh", A[subsets], np.nan_to_num(coefs))
            obj = np.where(ok, np.sum(res * res, axis=1), np.inf)
            best_subset = subsets[int(np.argmin(obj))]
        else:
            best_subset = _lts_search(A, y, h, seed, n_starts, n_csteps, n_keep, max_steps)

    block = A[best_subset]
    coef, _, rank, _ = np.linalg.lstsq(block, y[best_subset], rcond=None)
    if rank < k:
        raise DegenerateDesign("retained predictor block is rank-deficient")
    res = y[best_subset] - block @ coef
    return LtsFit(coef, np.sort(best_subset), float(trim_fraction), h,
                  float(res @ res), bool(exhaustive))


def _lts_search(A, y, h, seed, n_starts, n_csteps, n_keep, max_steps):
    n, k = A.shape
    rng = np.random.default_rng(seed)
    _, starts = _elemental_subsets(rng, n, k, n_starts)
    coefs = _batch_ols(A, y, starts)
    ok = np.isfinite(coefs).all(axis=1)
    if not ok.any():
        raise DegenerateDesign("every elemental start is rank-deficient")
    subsets, obj = _trimmed_objective(A, y, coefs[ok], h)
    for _ in range(n_csteps):
        coefs = _batch_ols(A, y, subsets)
        ok = np.isfinite(coefs).all(axis=1)
        if not ok.any():
            raise DegenerateDesign("every candidate design block is rank-deficient")
        subsets, obj = _trimmed_objective(A, y, coefs[ok], h)
    best_subset, best_obj, seen = None, np.inf, set()
    for idx in np.argsort(obj, kind="stable"):
        if len(seen) >= n_keep:
            break
        key = subsets[idx].tobytes()
        if key in seen:
            continue
        seen.add(key)
        cur, cur_obj = _lts_refine(A, y, subsets[idx], h, max_steps)
        if cur_obj < best_obj:
            best_subset, best_obj = cur, cur_obj
    if best_subset is None:
        raise DegenerateDesign("every candidate design block is rank-deficient")
    return best_subset


def variation_matrix_robust(table, seed=0, h=None) -> VariationMatrix:
    """Variation matrix from univariate MCD variances of each log-ratio.

    Each entry is the consistency-corrected MCD variance of the series
    ``ln(x_ij / x_ik)``. The univariate MCD is computed exactly, so ``seed``
    has no influence; it is accepted for interface uniformity.
    """
    values, labels = _table_values(table)
    n, D = values.shape
    if n <= 2:
        raise InsufficientRows("the robust variation matrix needs n > 2")
    h = default_h(n, 1) if h is None else int(h)
    c = consistency_factor(h, n, 1)
    logs = np.log(values)
    t = np.zeros((D, D))
    for j in range(D):
        for k in range(j + 1, D):
            _, var, _ = mcd_univariate(logs[:, j] - logs[:, k], h)
            t[j, k] = t[k, j] = c * var
    return VariationMatrix(t, "robust", labels)
