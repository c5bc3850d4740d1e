"""Numerical toolkit for local Tb theorems on non-homogeneous measures.

Modules: measure (atomic measures, accretive functions), dyadic (shifted
grids, goodness), haar (b-adapted Haar bases), kernel (truncated CZ
operators), carleson (BMO, Carleson norms, paraproducts), decoupling
(tangent sequences, R-bounds) and estimator (pair expansion, experiments).
"""

from . import carleson, decoupling, dyadic, estimator, haar, kernel, measure

__version__ = "0.1.0"

__all__ = ["carleson", "decoupling", "dyadic", "estimator", "haar", "kernel", "measure", "__version__"]
