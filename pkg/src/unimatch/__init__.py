"""Unsupervised, cycle-consistent matching of shape collections.

Every shape is matched to a virtual universe shape by a per-vertex
classifier; pairwise correspondences are compositions of these assignments
and therefore cycle-consistent by construction. Training is unsupervised,
driven by functional-map regularity losses.
"""

from .assignment import check_cycle_consistency, compose_pairwise, harden, sinkhorn
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    UnimatchError,
)
from .fmap import FunctionalMap, PointMap, fmap_to_pointmap, partial_rank, resolvent_mask, solve_fmap
from .losses import COMPLETE, PARTIAL, LossWeights
from .mesh import TriangleMesh, load_mesh, save_mesh
from .model import prepare_collection, prepare_shape
from .spectral import SpectralBasis, cotan_laplacian, eigenbasis, mesh_eigenbasis
from .train import TrainingConfig, fine_tune, infer_collection, infer_match, train

__version__ = "0.1.0"

__all__ = [
    "COMPLETE",
    "PARTIAL",
    "ConfigError",
    "DataError",
    "FunctionalMap",
    "LossWeights",
    "NumericalError",
    "PointMap",
    "SpectralBasis",
    "TrainingConfig",
    "TriangleMesh",
    "UnimatchError",
    "check_cycle_consistency",
    "compose_pairwise",
    "cotan_laplacian",
    "eigenbasis",
    "fine_tune",
    "fmap_to_pointmap",
    "harden",
    "infer_collection",
    "infer_match",
    "load_mesh",
    "mesh_eigenbasis",
    "partial_rank",
    "prepare_collection",
    "prepare_shape",
    "resolvent_mask",
    "save_mesh",
    "sinkhorn",
    "solve_fmap",
    "train",
]
