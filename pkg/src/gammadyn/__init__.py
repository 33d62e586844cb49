"""Truncated correlation-function hierarchies for spatial birth-and-death dynamics."""

__version__ = "0.1.0"

from .grid import GridGeometry, ConfigSpace
from .gamma import (
    TruncatedGammaFunction,
    NormContext,
    lp_integral,
    e_lambda,
    k_transform,
    k_inverse,
    duality_pairing,
    norm_LC,
    norm_KC,
    minlos_check,
)

__all__ = [
    "GridGeometry",
    "ConfigSpace",
    "TruncatedGammaFunction",
    "NormContext",
    "lp_integral",
    "e_lambda",
    "k_transform",
    "k_inverse",
    "duality_pairing",
    "norm_LC",
    "norm_KC",
    "minlos_check",
]
