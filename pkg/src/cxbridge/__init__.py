"""Convex-order domination, entropic martingale couplings, and the 1-D
three-Gaussian decomposition, with statistical verification harnesses."""

from .measures import (
    DiscreteMeasure,
    GaussianReference,
    Partition,
    QuadratureRule,
    build_quadrature,
    center,
    coarsen_cx,
    load_measure,
)

__version__ = "0.1.0"

__all__ = [
    "DiscreteMeasure",
    "GaussianReference",
    "Partition",
    "QuadratureRule",
    "build_quadrature",
    "center",
    "coarsen_cx",
    "load_measure",
    "__version__",
]
