"""Compositional data analysis: log-ratio geometry, robust estimation,
imputation, clustering, PCA and t-SNE, plus a command-line pipeline."""

from .coda import (
    CompositionTable,
    CoordinateMatrix,
    VariationMatrix,
    aitchison_distance,
    aitchison_distances,
    alr,
    alr_inverse,
    center,
    closure,
    clr,
    clr_inverse,
    ilr,
    ilr_inverse,
    pivot_basis,
    variation_matrix_classical,
)
from .robust import fast_mcd, lts_regression, variation_matrix_robust

__version__ = "0.1.0"

__all__ = [
    "CompositionTable",
    "CoordinateMatrix",
    "VariationMatrix",
    "aitchison_distance",
    "aitchison_distances",
    "alr",
    "alr_inverse",
    "center",
    "closure",
    "clr",
    "clr_inverse",
    "fast_mcd",
    "ilr",
    "ilr_inverse",
    "lts_regression",
    "pivot_basis",
    "variation_matrix_classical",
    "variation_matrix_robust",
]
