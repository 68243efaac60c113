"""Regularized functional-map solver and functional-map / point-map conversions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar

import numpy as np
import torch

from .errors import DimensionError, ParseError, SingularError
from .spectral import SpectralBasis

DEFAULT_GAMMA = 0.5
LAMBDA_COMPLETE = 0.0
LAMBDA_PARTIAL = 100.0


@dataclass(frozen=True, eq=False)
class ResolventMask:
    values: np.ndarray  # [k_y, k_x]
    gamma: float


def resolvent_mask(evals_x, evals_y, gamma: float = DEFAULT_GAMMA) -> ResolventMask:
    """Entrywise resolvent penalty between eigenvalues of Y (rows) and X (columns)."""
    lx = np.asarray(evals_x, dtype=np.float64)
    ly = np.asarray(evals_y, dtype=np.float64)
    if np.any(lx < 0) or np.any(ly < 0):
        raise DimensionError("eigenvalues must be nonnegative")
    lx_g, ly_g = lx ** gamma, ly ** gamma
    re_x = lx_g / (lx_g ** 2 + 1)
    re_y = ly_g / (ly_g ** 2 + 1)
    im_x = 1.0 / (lx_g ** 2 + 1)
    im_y = 1.0 / (ly_g ** 2 + 1)
    M = (re_y[:, None] - re_x[None, :]) ** 2 + (im_y[:, None] - im_x[None, :]) ** 2
    return ResolventMask(M, float(gamma))


@dataclass(eq=False)
class FunctionalMap:
    """``C`` maps reduced coefficients of X to those of Y (``C @ A_x ~ A_y``)."""

    C: torch.Tensor  # [k_y, k_x]
    lam: float = 0.0
    gamma: float = DEFAULT_GAMMA
    source: str = ""
    target: str = ""

    instances: ClassVar[int] = 0

    def __post_init__(self):
        type(self).instances += 1
        if not torch.isfinite(self.C).all():
            raise SingularError("functional map has non-finite entries")

    @property
    def shape(self):
        return tuple(self.C.shape)


def _row_systems(A_x, mask_lam):
    G = A_x @ A_x.T
    S = G.unsqueeze(0) + torch.diag_embed(mask_lam)  # [k_y, k_x, k_x]
    return S


def _factor(S):
    L, info = torch.linalg.cholesky_ex(S)
    if bool((info != 0).any()):
        raise SingularError("regularized functional-map system is singular")
    ev = torch.linalg.eigvalsh(S)
    if bool((ev[:, 0] <= 1e-13 * ev[:, -1].clamp_min(1e-300)).any()):
        raise SingularError("regularized functional-map system is numerically singular")
    return L


class _RegularizedSolve(torch.autograd.Function):
    """Row-wise solve of ``(A_x A_x^T + diag(lam * M_i)) c_i = A_x a_i``.

    Backward uses the adjoint systems with the same Cholesky factors.
    """

    @staticmethod
    def forward(ctx, A_x, A_y, mask_lam):
        S = _row_systems(A_x, mask_lam)
        L = _factor(S)
        rhs = (A_y @ A_x.T).unsqueeze(-1)  # row i: A_x a_i, [k_y, k_x, 1]
        C = torch.cholesky_solve(rhs, L).squeeze(-1)
        ctx.save_for_backward(A_x, A_y, L, C)
        return C

    @staticmethod
    def backward(ctx, grad_C):
        A_x, A_y, L, C = ctx.saved_tensors
        V = torch.cholesky_solve(grad_C.unsqueeze(-1), L).squeeze(-1)  # adjoints, [k_y, k_x]
        # dS_i = -v_i c_i^T summed over rows feeds G = A_x A_x^T
        dG = -(V.T @ C)
        grad_Ax = (dG + dG.T) @ A_x + V.T @ A_y
        grad_Ay = V @ A_x
        return grad_Ax, grad_Ay, None


def solve_fmap(A_x, A_y, mask: ResolventMask | None = None, lam: float = 0.0,
               source: str = "", target: str = "") -> FunctionalMap:
    """Minimize ``||C A_x - A_y||_F^2 + lam * sum_ij M_ij C_ij^2``.

    Parameters
    ----------
    A_x : tensor, shape=[k_x, c]
    A_y : tensor, shape=[k_y, c]
    mask : ResolventMask, shape=[k_y, k_x]
    lam : float
    """
    A_x = torch.as_tensor(A_x)
    A_y = torch.as_tensor(A_y, dtype=A_x.dtype)
    if A_x.ndim != 2 or A_y.ndim != 2 or A_x.shape[1] != A_y.shape[1]:
        raise DimensionError(f"coefficient shapes {tuple(A_x.shape)} and {tuple(A_y.shape)} disagree")
    if lam < 0:
        raise DimensionError("lambda must be nonnegative")
    k_x, k_y = A_x.shape[0], A_y.shape[0]
    if mask is None:
        M = torch.zeros(k_y, k_x, dtype=A_x.dtype)
        gamma = DEFAULT_GAMMA
    else:
        if mask.values.shape != (k_y, k_x):
            raise DimensionError(f"mask shape {mask.values.shape} != {(k_y, k_x)}")
        M = torch.as_tensor(mask.values, dtype=A_x.dtype)
        gamma = mask.gamma
    C = _RegularizedSolve.apply(A_x, A_y, lam * M)
    return FunctionalMap(C, lam=float(lam), gamma=gamma, source=source, target=target)


def dense_fmap_oracle(A_x, A_y, M, lam) -> np.ndarray:
    """Full ``k_y*k_x`` normal-equation solve of the same quadratic program.

    Kept separate from :func:`solve_fmap` so each can check the other.
    """
    A_x = np.asarray(A_x, dtype=np.float64)
    A_y = np.asarray(A_y, dtype=np.float64)
    k_x, k_y = A_x.shape[0], A_y.shape[0]
    # vec(C A_x) = (A_x^T kron I_ky) vec(C) with column-major vec
    K = np.kron(A_x.T, np.eye(k_y))
    H = K.T @ K + lam * np.diag(np.asarray(M).ravel(order="F"))
    g = K.T @ A_y.ravel(order="F")
    return np.linalg.solve(H, g).reshape(k_y, k_x, order="F")


# ---------------------------------------------------------------------------
# point maps


@dataclass(frozen=True, eq=False)
class PointMap:
    """Row ``i`` of the source maps to ``target[i]`` of the target shape, or -1."""

    target: np.ndarray
    n_target: int
    source_id: str = ""
    target_id: str = ""

    NONE: ClassVar[int] = -1

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.int64)
        if np.any((t < -1) | (t >= self.n_target)):
            raise DimensionError("point-map target index out of range")
        object.__setattr__(self, "target", t)

    @property
    def n_source(self) -> int:
        return len(self.target)

    @property
    def matched(self) -> np.ndarray:
        return self.target >= 0

    def to_matrix(self) -> np.ndarray:
        P = np.zeros((self.n_source, self.n_target), dtype=np.int8)
        rows = np.flatnonzero(self.matched)
        P[rows, self.target[rows]] = 1
        return P

    def is_injective(self) -> bool:
        t = self.target[self.matched]
        return len(np.unique(t)) == len(t)

    def then(self, other: "PointMap") -> "PointMap":
        """Composition: first ``self`` then ``other``."""
        if other.n_source != self.n_target:
            raise DimensionError("point maps do not chain")
        out = np.full(self.n_source, -1, dtype=np.int64)
        m = self.matched
        out[m] = other.target[self.target[m]]
        return PointMap(out, other.n_target, self.source_id, other.target_id)


def nearest_rows(query: np.ndarray, ref: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the Euclidean-nearest ``ref`` row for every ``query`` row.

    Ties go to the lowest index.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), chunk):
        diff = query[s:s + chunk, None, :] - ref[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return out


def fmap_to_pointmap(C_xy, basis_x: SpectralBasis, basis_y: SpectralBasis) -> PointMap:
    """Point map from Y to X: each row of ``Phi_y C_xy`` to its nearest row of ``Phi_x``."""
    C = C_xy.C if isinstance(C_xy, FunctionalMap) else C_xy
    C = C.detach().cpu().numpy() if isinstance(C, torch.Tensor) else np.asarray(C)
    k_y, k_x = C.shape
    if k_y > basis_y.k or k_x > basis_x.k:
        raise DimensionError("functional map larger than the bases")
    emb_y = basis_y.evecs[:, :k_y] @ C
    idx = nearest_rows(emb_y, basis_x.evecs[:, :k_x])
    return PointMap(idx, basis_x.n)


def partial_rank(evals_x, evals_y) -> int:
    """Largest 1-based ``i`` with ``evals_y[i] < max(evals_x)``; 0 when none qualifies."""
    lx = np.asarray(evals_x, dtype=np.float64)
    ly = np.asarray(evals_y, dtype=np.float64)
    if lx.size == 0 or ly.size == 0:
        raise DimensionError("spectra must be nonempty")
    hits = np.flatnonzero(ly < lx.max())
    return int(hits.max() + 1) if hits.size else 0


# ---------------------------------------------------------------------------
# text export


def save_fmap(fm: FunctionalMap, path) -> None:
    C = fm.C.detach().cpu().numpy()
    header = f"{C.shape[0]} {C.shape[1]} {fm.lam:.17g} {fm.gamma:.17g}"
    np.savetxt(path, C, header=header, comments="", fmt="%.17g")


def load_fmap(path) -> FunctionalMap:
    path = Path(path)
    with open(path) as fh:
        head = fh.readline().split()
    try:
        k_y, k_x, lam, gamma = int(head[0]), int(head[1]), float(head[2]), float(head[3])
        C = np.loadtxt(path, skiprows=1, ndmin=2)
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed functional-map file") from exc
    if C.shape != (k_y, k_x):
        raise ParseError(f"{path}: header says {(k_y, k_x)}, body is {C.shape}")
    return FunctionalMap(torch.as_tensor(C), lam=lam, gamma=gamma)
