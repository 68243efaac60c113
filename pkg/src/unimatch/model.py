"""Per-vertex feature extractor and universe classifier, plus per-shape inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .cache import cached_basis, cached_shot
from .descriptors import SHOT_DIM, SHOT_RADIUS_FRAC, bbox_diagonal
from .mesh import TriangleMesh, total_area
from .spectral import SpectralBasis

N_SPECTRAL_INPUTS = 16
FEATURE_WIDTHS = (SHOT_DIM + N_SPECTRAL_INPUTS, 256, 256, 128)


@dataclass(eq=False)
class ShapeData:
    """Everything the networks and losses need for one shape."""

    id: str
    mesh: TriangleMesh
    basis: SpectralBasis
    shot: np.ndarray
    area: float

    @property
    def n(self) -> int:
        return self.mesh.n

    def inputs(self, dtype=torch.float64) -> torch.Tensor:
        """SHOT concatenated with the first sign-fixed spectral coordinates.

        Spectral coordinates are multiplied by ``sqrt(area)`` so they do not
        depend on the mesh scale.
        """
        m = min(N_SPECTRAL_INPUTS, self.basis.k)
        coords = np.zeros((self.n, N_SPECTRAL_INPUTS))
        coords[:, :m] = self.basis.evecs[:, :m] * np.sqrt(self.area)
        return torch.as_tensor(np.hstack([self.shot, coords]), dtype=dtype)

    def phi(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.basis.evecs, dtype=dtype)


def prepare_shape(mesh: TriangleMesh, k: int, shape_id: str | None = None, cache_dir=None,
                  radius_frac: float = SHOT_RADIUS_FRAC, stats: dict | None = None,
                  shot_radius: float | None = None) -> ShapeData:
    """Spectral basis and SHOT for one mesh; ``shot_radius`` fixes an absolute SHOT support."""
    basis = cached_basis(mesh, k, cache_dir, stats)
    feat = cached_shot(mesh, radius_frac, cache_dir, stats, radius=shot_radius)
    return ShapeData(shape_id or mesh.name, mesh, basis, feat.values, total_area(mesh))


def prepare_collection(meshes, k: int, partial: bool = False, cache_dir=None,
                       radius_frac: float = SHOT_RADIUS_FRAC, stats: dict | None = None) -> list:
    """Prepare every mesh; with ``partial`` all SHOT supports use the first (complete) mesh's radius.

    A partial shape has a smaller bounding box, so a per-mesh relative radius
    would describe it at a different scale than its complete reference.
    """
    radius = radius_frac * bbox_diagonal(meshes[0].vertices) if partial and meshes else None
    return [prepare_shape(m, k, cache_dir=cache_dir, radius_frac=radius_frac, stats=stats, shot_radius=radius)
            for m in meshes]


class PerVertexMLP(nn.Module):
    """Shared MLP applied independently to every vertex row."""

    def __init__(self, widths, activation=nn.SiLU, final_activation: bool = False):
        super().__init__()
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(widths) - 2 or final_activation:
                layers.append(activation())
        self.net = nn.Sequential(*layers)
        self.widths = tuple(widths)

    def forward(self, x):
        return self.net(x)


class FeatureNetwork(PerVertexMLP):
    def __init__(self, widths=FEATURE_WIDTHS):
        super().__init__(widths)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


class UniverseClassifier(PerVertexMLP):
    """Maps learned features to ``d`` universe logits per vertex."""

    def __init__(self, in_dim: int, d: int, hidden: int = 256):
        super().__init__((in_dim, hidden, d))
        self.d = d


@dataclass(eq=False)
class Networks:
    feature: FeatureNetwork
    classifier: UniverseClassifier | None

    def parameters(self):
        yield from self.feature.parameters()
        if self.classifier is not None:
            yield from self.classifier.parameters()

    def named_tensors(self) -> dict:
        out = {f"feature.{k}": v for k, v in self.feature.state_dict().items()}
        if self.classifier is not None:
            out.update({f"classifier.{k}": v for k, v in self.classifier.state_dict().items()})
        return out

    def load_named(self, tensors: dict) -> None:
        self.feature.load_state_dict(
            {k[8:]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith("feature.")}
        )
        if self.classifier is not None:
            self.classifier.load_state_dict(
                {k[11:]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith("classifier.")}
            )

    def to(self, dtype):
        self.feature.to(dtype)
        if self.classifier is not None:
            self.classifier.to(dtype)
        return self

    def clone(self) -> "Networks":
        feat = FeatureNetwork(self.feature.widths)
        feat.load_state_dict(self.feature.state_dict())
        cls = None
        if self.classifier is not None:
            cls = UniverseClassifier(self.classifier.widths[0], self.classifier.d, self.classifier.widths[1])
            cls.load_state_dict(self.classifier.state_dict())
        dtype = next(self.feature.parameters()).dtype
        return Networks(feat, cls).to(dtype)


def build_networks(d: int | None, seed: int, widths=FEATURE_WIDTHS, hidden: int = 256,
                   dtype=torch.float64) -> Networks:
    """Seeded construction; ``d=None`` builds a classifier-free model."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        feat = FeatureNetwork(widths)
        cls = UniverseClassifier(widths[-1], d, hidden) if d is not None else None
    return Networks(feat, cls).to(dtype)
