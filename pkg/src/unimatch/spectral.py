"""Cotangent Laplace-Beltrami operator and its truncated eigenbasis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import ConvergenceError, DegenerateError, DimensionError
from .mesh import TriangleMesh

DENSE_MAX_N = 512
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """First ``k`` generalized eigenpairs of ``L phi = lambda M phi``.

    Attributes
    ----------
    evecs : ndarray, shape=[n, k]
        Mass-orthonormal eigenfunctions.
    evals : ndarray, shape=[k]
        Nondecreasing, nonnegative eigenvalues.
    mass : ndarray, shape=[n]
        Lumped vertex areas.
    """

    evecs: np.ndarray
    evals: np.ndarray
    mass: np.ndarray

    @property
    def k(self) -> int:
        return self.evecs.shape[1]

    @property
    def n(self) -> int:
        return self.evecs.shape[0]

    def truncate(self, k: int) -> "SpectralBasis":
        return SpectralBasis(self.evecs[:, :k], self.evals[:k], self.mass)


def cotan_laplacian(mesh: TriangleMesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Stiffness matrix ``L`` (PSD, zero row sums) and lumped mass vector ``M``.

    Off-diagonal entry for edge (i, j) is ``-(cot a + cot b) / 2`` with a, b the
    angles opposite the edge; ``M_i`` is a third of the area around vertex i.
    """
    v, f = mesh.vertices, mesh.faces
    areas = mesh.face_areas
    if np.any(areas <= 1e-14 * max(areas.max(), 1e-300)):
        raise DegenerateError("zero-area face; cotangent weights undefined")
    L_entries = []
    for c in range(3):
        i, j, o = f[:, (c + 1) % 3], f[:, (c + 2) % 3], f[:, c]
        u = v[i] - v[o]
        w = v[j] - v[o]
        # cot = (u . w) / |u x w| = (u . w) / (2 * area)
        cot = np.einsum("ij,ij->i", u, w) / (2.0 * areas)
        L_entries.append((i, j, 0.5 * cot))
    n = mesh.n
    rows = np.concatenate([np.r_[i, j] for i, j, _ in L_entries])
    cols = np.concatenate([np.r_[j, i] for i, j, _ in L_entries])
    vals = np.concatenate([np.r_[w, w] for _, _, w in L_entries])
    W = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    mass = np.zeros(n)
    for c in range(3):
        np.add.at(mass, f[:, c], areas / 3.0)
    return L.tocsr(), mass


def _fix_signs(evecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(evecs), axis=0)
    s = np.sign(evecs[idx, np.arange(evecs.shape[1])])
    s[s == 0] = 1.0
    return evecs * s


def eigenbasis(L, mass: np.ndarray, k: int, method: str = "auto") -> SpectralBasis:
    """Solve ``L phi = lambda diag(mass) phi`` for the ``k`` smallest eigenvalues.

    ``method`` is ``"dense"``, ``"sparse"`` (shift-invert Lanczos near zero) or
    ``"auto"``, which picks dense for ``n <= 512``.
    """
    n = len(mass)
    if k < 1 or k > n:
        raise DimensionError(f"k={k} must lie in [1, {n}]")
    if method == "auto":
        method = "dense" if n <= DENSE_MAX_N else "sparse"
    L = sp.csr_matrix(L)
    M = sp.diags(mass)
    if method == "dense" or k >= n - 1:
        evals, evecs = la.eigh(L.toarray(), np.diag(mass), subset_by_index=[0, k - 1])
    elif method == "sparse":
        # sigma slightly below zero keeps L - sigma*M positive definite
        sigma = -1e-8 * abs(L.diagonal()).max()
        v0 = np.random.default_rng(0).uniform(0.5, 1.5, n)  # fixed start vector: reproducible output
        try:
            evals, evecs = sla.eigsh(L, k=k, M=M, sigma=sigma, which="LM", tol=0, v0=v0)
        except sla.ArpackNoConvergence as exc:
            raise ConvergenceError("Lanczos iteration did not converge") from exc
        order = np.argsort(evals)
        evals, evecs = evals[order], evecs[:, order]
    else:
        raise ValueError(f"unknown method {method!r}")

    evals = np.maximum(evals, 0.0)
    evals[0] = 0.0 if abs(evals[0]) < 1e-10 * max(1.0, evals[-1]) else evals[0]
    # renormalize against the lumped mass to scrub solver round-off
    evecs = evecs / np.sqrt(np.einsum("ij,i,ij->j", evecs, mass, evecs))
    evecs = _fix_signs(evecs)

    Lphi = L @ evecs
    res = np.linalg.norm(Lphi - (mass[:, None] * evecs) * evals, axis=0)
    scale = np.maximum(np.linalg.norm(Lphi, axis=0), np.linalg.norm(mass[:, None] * evecs, axis=0))
    if np.any(res > RESIDUAL_TOL * np.maximum(scale, 1.0)):
        raise ConvergenceError(f"eigen residual {res.max():.3e} above target")
    return SpectralBasis(evecs, evals, mass)


def mesh_eigenbasis(mesh: TriangleMesh, k: int, method: str = "auto") -> SpectralBasis:
    L, mass = cotan_laplacian(mesh)
    return eigenbasis(L, mass, k, method=method)


def project(basis: SpectralBasis, F):
    """Reduced coefficients ``Phi^T diag(M) F``; works for numpy and torch inputs."""
    if F.shape[0] != basis.n:
        raise DimensionError(f"feature rows {F.shape[0]} != basis rows {basis.n}")
    if isinstance(F, np.ndarray):
        return basis.evecs.T @ (basis.mass[:, None] * F)
    import torch

    pinv = torch.as_tensor((basis.evecs * basis.mass[:, None]).T, dtype=F.dtype)
    return pinv @ F
