"""Classical and robust PCA of ilr coordinates with clr biplot loadings.

Both fits return a :class:`PcaModel`. Loadings live in ilr space; mapping
them through the contrast matrix gives clr loadings, which carry one entry
per component and are what a compositional biplot draws as arrows.

Every loading column is flipped so that its largest-magnitude clr entry is
positive. Because the clr loadings do not depend on the ilr basis, this
makes the sign choice basis independent as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coda import CoordinateMatrix, _check_basis, pivot_basis
from .errors import BasisMismatch, DegenerateData, DimensionError
from .robust import fast_mcd

TIE_TOL = 1e-9


@dataclass
class PcaModel:
    loadings_ilr: np.ndarray
    scores: np.ndarray
    variances: np.ndarray
    method: str
    center: np.ndarray
    basis: np.ndarray
    labels: tuple = ()
    row_ids: tuple = ()
    n_ratio: int = 2
    mcd: object = None

    @property
    def p(self) -> int:
        return self.loadings_ilr.shape[1]

    @property
    def loadings_clr(self) -> np.ndarray:
        return self.basis.T @ self.loadings_ilr

    @property
    def explained(self) -> np.ndarray:
        return self.variances / self.variances.sum()

    @property
    def explained_ratio(self) -> float:
        """Share of total variance in the first ``n_ratio`` components."""
        return float(self.explained[: self.n_ratio].sum())

    @property
    def explained_ratio_2pc(self) -> float:
        return float(self.explained[:2].sum())

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "labels": list(self.labels),
            "row_ids": [str(r) for r in self.row_ids],
            "variances": self.variances.tolist(),
            "explained": self.explained.tolist(),
            "explained_ratio_2pc": self.explained_ratio_2pc,
            "center": self.center.tolist(),
            "loadings_ilr": self.loadings_ilr.tolist(),
            "loadings_clr": self.loadings_clr.tolist(),
            "scores": self.scores.tolist(),
        }


def _unpack(coords, basis=None):
    if isinstance(coords, CoordinateMatrix):
        if coords.kind != "ilr":
            raise BasisMismatch("PCA expects ilr coordinates")
        z = np.asarray(coords.values, dtype=float)
        basis = coords.basis if basis is None else basis
        labels, row_ids = coords.labels, coords.row_ids
    else:
        z = np.asarray(coords, dtype=float)
        labels, row_ids = (), ()
    if z.ndim != 2:
        raise DimensionError("coordinates must be a 2-D array")
    D = z.shape[1] + 1
    basis = pivot_basis(D) if basis is None else _check_basis(basis, D)
    return z, basis, tuple(labels), tuple(row_ids)


def _orient(loadings, basis):
    # flip so the dominant clr entry of each column is positive
    clr = basis.T @ loadings
    dominant = clr[np.argmax(np.abs(clr), axis=0), np.arange(clr.shape[1])]
    return np.where(dominant < 0, -1.0, 1.0)


def pca_classical(coords, basis=None) -> PcaModel:
    """PCA by singular value decomposition of the centred coordinates.

    With ``Z - mean = U D W^T``, scores are ``U D``, loadings ``W`` and the
    variances ``d_i^2 / (n - 1)``.

    Raises
    ------
    DegenerateData
        If all rows coincide.
    """
    z, basis, labels, row_ids = _unpack(coords, basis)
    n = len(z)
    if n < 2:
        raise DimensionError("PCA needs at least two rows")
    mean = z.mean(axis=0)
    zc = z - mean
    u, d, wt = np.linalg.svd(zc, full_matrices=False)
    if d.size == 0 or d[0] <= 1e-12 * max(1.0, np.abs(z).max()):
        raise DegenerateData("all rows are identical")
    p = min(n, z.shape[1])
    u, d, w = u[:, :p], d[:p], wt[:p].T
    sign = _orient(w, basis)
    return PcaModel(w * sign, u * d * sign, d ** 2 / (n - 1), "classical", mean, basis,
                    labels, row_ids)


def pca_robust(coords, seed: int = 0, basis=None, **mcd_kwargs) -> PcaModel:
    """PCA from the eigendecomposition of the MCD covariance.

    Scores are the MCD-centred coordinates projected on the eigenvectors;
    variances are the eigenvalues in descending order.
    """
    z, basis, labels, row_ids = _unpack(coords, basis)
    est = fast_mcd(z, seed=seed, **mcd_kwargs)
    vals, vecs = np.linalg.eigh(est.covariance)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    sign = _orient(vecs, basis)
    vecs = vecs * sign
    return PcaModel(vecs, (z - est.location) @ vecs, vals, "robust", est.location, basis,
                    labels, row_ids, mcd=est)


def biplot_loadings_clr(model: PcaModel, basis=None, n_components: int = 2) -> np.ndarray:
    """clr loadings of the leading components, shape ``(D, n_components)``."""
    basis = model.basis if basis is None else np.asarray(basis, dtype=float)
    if basis.ndim != 2 or basis.shape[0] != model.loadings_ilr.shape[0]:
        raise BasisMismatch(
            f"basis has {basis.shape[0] if basis.ndim == 2 else '?'} rows, "
            f"loadings have {model.loadings_ilr.shape[0]}")
    return basis.T @ model.loadings_ilr[:, :n_components]


def biplot_coordinates(model: PcaModel, alpha: float = 0.5):
    """Point and arrow coordinates for a biplot of the first two components.

    With singular values ``d_k = sqrt((n - 1) * variance_k)``, points are
    ``scores / d^alpha`` and arrows are ``clr loadings * d^alpha``, so that
    ``alpha = 0.5`` splits the scale symmetrically.
    """
    n = len(model.scores)
    d = np.sqrt(max(n - 1, 1) * model.variances[:2])
    d = np.where(d > 0, d, 1.0)
    points = model.scores[:, :2] / d ** alpha
    arrows = biplot_loadings_clr(model) * d ** alpha
    return points, arrows


def select_pca(coords, seed: int = 0, basis=None, **mcd_kwargs):
    """Fit both PCAs and keep the one with the larger two-component ratio.

    Classical is kept unless robust exceeds it by more than ``1e-9``.

    Returns
    -------
    (PcaModel, dict)
        The chosen model and ``{"classical": ratio, "robust": ratio,
        "selected": method}``.
    """
    classical = pca_classical(coords, basis)
    robust = pca_robust(coords, seed=seed, basis=basis, **mcd_kwargs)
    rc, rr = classical.explained_ratio_2pc, robust.explained_ratio_2pc
    chosen = robust if rr > rc + TIE_TOL else classical
    return chosen, {"classical": rc, "robust": rr, "selected": chosen.method}
