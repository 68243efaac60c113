"""Handcrafted per-vertex descriptors: SHOT, HKS and WKS."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError
from .mesh import TriangleMesh
from .spectral import SpectralBasis

SHOT_AZIMUTH = 8
SHOT_ELEVATION = 2
SHOT_RADIAL = 2
SHOT_COS_BINS = 11
SHOT_DIM = SHOT_AZIMUTH * SHOT_ELEVATION * SHOT_RADIAL * SHOT_COS_BINS  # 352
SHOT_RADIUS_FRAC = 0.10


@dataclass(frozen=True, eq=False)
class FeatureField:
    values: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    flagged: np.ndarray | None = None  # SHOT only: vertices with a rank-deficient support

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def local_reference_frame(offsets: np.ndarray, radius: float, normal: np.ndarray):
    """SHOT local frame from neighbour offsets ``p_i - p``.

    Returns the 3x3 matrix with rows (x, y, z), or ``None`` when the weighted
    covariance has rank below two.
    """
    dist = np.linalg.norm(offsets, axis=1)
    w = radius - dist
    cov = (offsets * w[:, None]).T @ offsets / w.sum()
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        return None
    x = evecs[:, 2]
    z = evecs[:, 0]
    x = _disambiguate(x, offsets, w, radius, fallback=None)
    z = _disambiguate(z, offsets, w, radius, fallback=normal)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _disambiguate(axis, offsets, w, radius, fallback):
    """Majority-sign rule; ties go to the weighted projection, then ``fallback``."""
    proj = offsets @ axis
    eps = 1e-12 * radius
    vote = np.sum(proj > eps) - np.sum(proj < -eps)
    if vote == 0:
        vote = np.sum(w * proj)
        if abs(vote) <= eps * w.sum():
            vote = 1.0 if fallback is None else axis @ fallback
    return axis if vote >= 0 else -axis


def shot_bin_index(local: np.ndarray, radius: float) -> np.ndarray:
    """Spatial bin in [0, 32) for points given in local-frame coordinates."""
    azimuth = np.arctan2(local[:, 1], local[:, 0])  # (-pi, pi]
    a = np.floor((azimuth + np.pi) / (2 * np.pi) * SHOT_AZIMUTH).astype(int) % SHOT_AZIMUTH
    e = (local[:, 2] >= 0).astype(int)
    r = (np.linalg.norm(local, axis=1) >= 0.5 * radius).astype(int)
    return (r * SHOT_ELEVATION + e) * SHOT_AZIMUTH + a


def shot_signature(offsets, neighbor_normals, radius, normal) -> np.ndarray | None:
    """Unnormalized 352-bin histogram for one support region."""
    frame = local_reference_frame(offsets, radius, normal)
    if frame is None:
        return None
    local = offsets @ frame.T
    spatial = shot_bin_index(local, radius)
    cos = np.clip(neighbor_normals @ frame[2], -1.0, 1.0)
    # linear interpolation between the two nearest cosine-bin centres
    pos = (cos + 1.0) / 2.0 * SHOT_COS_BINS - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    hist = np.zeros((SHOT_AZIMUTH * SHOT_ELEVATION * SHOT_RADIAL, SHOT_COS_BINS))
    for b, wt in ((lo, 1.0 - frac), (lo + 1, frac)):
        b_c = np.clip(b, 0, SHOT_COS_BINS - 1)
        np.add.at(hist, (spatial, b_c), wt)
    return hist.ravel()


def bbox_diagonal(points: np.ndarray) -> float:
    """Diagonal of the principal-axes bounding box (rotation invariant)."""
    centered = points - points.mean(axis=0)
    _, _, axes = np.linalg.svd(centered, full_matrices=False)
    local = centered @ axes.T
    return float(np.linalg.norm(local.max(axis=0) - local.min(axis=0)))


def shot(mesh: TriangleMesh, radius_frac: float = SHOT_RADIUS_FRAC, radius: float | None = None) -> FeatureField:
    """SHOT descriptor per vertex, 352 dims, rows L2-normalized.

    The support radius is ``radius_frac`` times the mesh's bounding-box
    diagonal unless an absolute ``radius`` is given (partial shapes should
    use their complete reference's radius). Vertices whose support is rank
    deficient get a zero row and are listed in ``FeatureField.flagged``.
    """
    v = mesh.vertices
    normals = mesh.vertex_normals
    if radius is None:
        radius = radius_frac * bbox_diagonal(v)
    elif not radius > 0:
        raise DimensionError("SHOT radius must be positive")
    tree = cKDTree(v)
    out = np.zeros((mesh.n, SHOT_DIM))
    flagged = []
    for i, nbrs in enumerate(tree.query_ball_point(v, radius)):
        nbrs = np.asarray([j for j in nbrs if j != i], dtype=np.int64)
        if len(nbrs) < 3:
            flagged.append(i)
            continue
        h = shot_signature(v[nbrs] - v[i], normals[nbrs], radius, normals[i])
        if h is None or not h.any():
            flagged.append(i)
            continue
        out[i] = h / np.linalg.norm(h)
    return FeatureField(
        out, "SHOT", {"radius_frac": radius_frac, "radius": float(radius)}, flagged=np.asarray(flagged, dtype=np.int64)
    )


def default_hks_times(evals: np.ndarray, count: int = 16) -> np.ndarray:
    positive = evals[evals > 1e-10 * max(evals[-1], 1e-300)]
    if len(positive) == 0:
        return np.geomspace(1e-2, 1e2, count)
    lo = 4 * np.log(10) / positive[-1]
    hi = 4 * np.log(10) / positive[0]
    return np.geomspace(lo, hi, count)


def hks(basis: SpectralBasis, times=None) -> FeatureField:
    """Heat kernel signature ``sum_i exp(-lambda_i t) phi_i(v)^2``."""
    times = default_hks_times(basis.evals) if times is None else np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(times <= 0):
        raise DimensionError("times must be a 1-D array of positive values")
    decay = np.exp(-np.outer(basis.evals, times))  # [k, T]
    values = (basis.evecs ** 2) @ decay
    return FeatureField(values, "HKS", {"times": times.tolist()})


def default_wks_energies(evals: np.ndarray, count: int = 16) -> tuple[np.ndarray, float]:
    positive = evals[evals > 1e-10 * max(evals[-1], 1e-300)]
    if len(positive) < 2:
        return np.zeros(count), 1.0
    e = np.linspace(np.log(positive[0]), np.log(positive[-1]), count)
    return e, 7.0 * (e[1] - e[0])


def wks(basis: SpectralBasis, energies=None, sigma: float | None = None) -> FeatureField:
    """Wave kernel signature with Gaussian band-pass weights in log-eigenvalue.

    Each energy bin is ``sum_i w_i phi_i(v)^2 / sum_i w_i`` where
    ``w_i = exp(-(e - log lambda_i)^2 / (2 sigma^2))``. Zero eigenvalues are
    clamped to 1e-12 before the logarithm.
    """
    if energies is None:
        energies, default_sigma = default_wks_energies(basis.evals)
        sigma = default_sigma if sigma is None else sigma
    energies = np.asarray(energies, dtype=float)
    if sigma is None or sigma <= 0:
        raise DimensionError("sigma must be positive")
    loglam = np.log(np.maximum(basis.evals, 1e-12))
    logw = -((energies[None, :] - loglam[:, None]) ** 2) / (2 * sigma ** 2)  # [k, E]
    logw -= logw.max(axis=0, keepdims=True)
    w = np.exp(logw)
    values = (basis.evecs ** 2) @ w / w.sum(axis=0)
    return FeatureField(values, "WKS", {"energies": energies.tolist(), "sigma": float(sigma)})
