"""Evaluation: metrics, synthetic benchmark and ablations."""

from .ablation import AblationResult, run_ablation
from .metrics import GeodesicErrors, PckCurve, geodesic_error, pck, random_matching_error
from .synthetic import (
    GroundTruth,
    SyntheticCollection,
    bumpy_sphere,
    make_partial,
    make_synthetic_collection,
    pairwise_ground_truth,
)

__all__ = [
    "AblationResult",
    "GeodesicErrors",
    "GroundTruth",
    "PckCurve",
    "SyntheticCollection",
    "bumpy_sphere",
    "geodesic_error",
    "make_partial",
    "make_synthetic_collection",
    "pairwise_ground_truth",
    "pck",
    "random_matching_error",
    "run_ablation",
]
