import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from unimatch.mesh import TriangleMesh, grid_mesh, icosphere

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def sphere():
    return icosphere(3)


@pytest.fixture(scope="session")
def small_sphere():
    return icosphere(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def bumpy_grid(nx=6, ny=5, seed=0):
    """Flat grid with a smooth random height field, no symmetries."""
    g = grid_mesh(nx, ny, 1.0 / (nx - 1))
    r = np.random.default_rng(seed)
    v = g.vertices.copy()
    v[:, 2] = 0.15 * np.sin(3 * v[:, 0] + r.uniform()) * np.cos(2 * v[:, 1]) + 0.05 * r.standard_normal(len(v))
    return TriangleMesh(v, g.faces, name=f"bumpy{seed}")


def random_rotation(seed):
    from scipy.spatial.transform import Rotation

    return Rotation.random(random_state=seed).as_matrix()


def permute_mesh(mesh, perm, name=""):
    """New vertex i is old vertex perm[i]."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return TriangleMesh(mesh.vertices[perm], inv[mesh.faces], name=name or mesh.name + "_perm")
