"""Synthetic near-isometric benchmark: a bumpy sphere, deformed and re-ordered.

Every generated shape carries the index of each of its vertices in the shared
base mesh, which plays the role of the datasets' reference shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import DataError, ParseError
from ..mesh import TriangleMesh, geodesic_distances, icosphere, is_connected, total_area

BASE_SEED = 1234
DEFAULT_AMPLITUDE = 1.0


@dataclass(frozen=True)
class GroundTruth:
    """``labels[i]`` is the reference-shape vertex of vertex i, or -1."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    def validate(self, n_ref: int):
        if np.any((self.labels < -1) | (self.labels >= n_ref)):
            raise DataError("ground-truth index out of range")

    def save(self, path) -> None:
        np.savetxt(path, self.labels, fmt="%d")

    @classmethod
    def load(cls, path, index_base: int = 0) -> "GroundTruth":
        try:
            raw = np.loadtxt(path, dtype=np.int64, ndmin=1)
        except ValueError as exc:
            raise ParseError(f"{path}: malformed ground-truth file") from exc
        if index_base not in (0, 1):
            raise ParseError("index base must be 0 or 1")
        labels = np.where(raw >= 0, raw - index_base, -1) if index_base else raw
        return cls(labels)


def pairwise_ground_truth(gt_x: GroundTruth, gt_y: GroundTruth, n_ref: int | None = None) -> np.ndarray:
    """True Y vertex for every X vertex (-1 if X is unlabelled or Y lacks it)."""
    lx, ly = gt_x.labels, gt_y.labels
    n_ref = n_ref or int(max(lx.max(), ly.max())) + 1
    inv = np.full(n_ref, -1, dtype=np.int64)
    keep = ly >= 0
    inv[ly[keep]] = np.flatnonzero(keep)
    out = np.full(len(lx), -1, dtype=np.int64)
    ok = lx >= 0
    out[ok] = inv[lx[ok]]
    return out


@dataclass
class SyntheticCollection:
    meshes: list
    gt: list
    reference: TriangleMesh
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.meshes)

    def pair_gt(self, i: int, j: int) -> np.ndarray:
        return pairwise_ground_truth(self.gt[i], self.gt[j], self.reference.n)

    def save(self, directory) -> list:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        from ..mesh import save_mesh

        paths = []
        for mesh, gt in zip(self.meshes, self.gt):
            p = d / f"{mesh.name}.off"
            save_mesh(mesh, p)
            gt.save(d / f"{mesh.name}.gt.txt")
            paths.append(p)
        save_mesh(self.reference, d / "reference.off")
        return paths


def bumpy_sphere(subdivisions: int = 3, n_bumps: int = 7, seed: int = BASE_SEED) -> TriangleMesh:
    """Icosphere with a fixed set of Gaussian radial bumps breaking its symmetry."""
    sphere = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    heights = rng.uniform(0.15, 0.4, n_bumps)
    widths = rng.uniform(0.3, 0.55, n_bumps)
    v = sphere.vertices
    d2 = ((v[:, None, :] - centers[None]) ** 2).sum(-1)
    radius = 1.0 + (heights * np.exp(-d2 / (2 * widths ** 2))).sum(axis=1)
    return TriangleMesh(v * radius[:, None], sphere.faces, name="bumpy-sphere")


def _base_mesh(base: str, subdivisions: int) -> TriangleMesh:
    if base == "icosphere":
        return icosphere(subdivisions)
    if base == "bumpy-sphere":
        return bumpy_sphere(subdivisions)
    raise ValueError(f"unknown base {base!r}")


def deform(mesh: TriangleMesh, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency normal displacement followed by a gentle bend.

    ``amplitude`` scales both effects; 1.0 keeps edge-length changes well
    below 10% on the default base.
    """
    v = mesh.vertices
    if amplitude == 0:
        return v.copy()
    c = v - v.mean(axis=0)
    scale = np.linalg.norm(c, axis=1).max()
    u = c / scale
    # degree <= 2 polynomial field on the unit ball
    basis = np.c_[u, u[:, [0]] * u[:, [1]], u[:, [1]] * u[:, [2]], u[:, [0]] * u[:, [2]],
                  u[:, [0]] ** 2 - u[:, [1]] ** 2, 3 * u[:, [2]] ** 2 - 1]
    coef = rng.standard_normal(basis.shape[1])
    coef /= np.linalg.norm(coef)
    disp = 0.012 * amplitude * scale * (basis @ coef)
    v = v + disp[:, None] * mesh.vertex_normals
    # bend: rotate about an axis by an angle proportional to the height along a perpendicular axis
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    along = np.cross(axis, rng.standard_normal(3))
    along /= np.linalg.norm(along)
    h = (v - v.mean(axis=0)) @ along / scale
    angles = 0.05 * amplitude * h
    rots = Rotation.from_rotvec(angles[:, None] * axis[None, :])
    centre = v.mean(axis=0)
    return rots.apply(v - centre) + centre


def make_synthetic_collection(base: str = "bumpy-sphere", count: int = 8, seed: int = 0,
                              amplitude: float = DEFAULT_AMPLITUDE, subdivisions: int = 3,
                              prefix: str = "shape") -> SyntheticCollection:
    """``count`` deformed, randomly rotated, vertex-permuted copies of one base mesh."""
    if count < 2:
        raise DataError("a collection needs at least two shapes")
    ref = _base_mesh(base, subdivisions)
    rng = np.random.default_rng(seed)
    meshes, gts = [], []
    for s in range(count):
        v = deform(ref, amplitude, rng)
        if amplitude:
            v = Rotation.random(random_state=rng.integers(2**31)).apply(v)
        perm = rng.permutation(ref.n)  # new vertex i is old vertex perm[i]
        inv = np.empty_like(perm)
        inv[perm] = np.arange(ref.n)
        mesh = TriangleMesh(v[perm], inv[ref.faces], name=f"{prefix}_{s:03d}")
        meshes.append(mesh)
        gts.append(GroundTruth(perm))
    params = {"base": base, "count": count, "seed": seed, "amplitude": amplitude, "subdivisions": subdivisions}
    return SyntheticCollection(meshes, gts, ref, params)


def edge_length_change(ref: TriangleMesh, mesh: TriangleMesh, gt: GroundTruth) -> float:
    """Largest relative edge-length change between a shape and the reference."""
    lab = gt.labels
    e = mesh.edges
    la = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    lr = np.linalg.norm(ref.vertices[lab[e[:, 0]]] - ref.vertices[lab[e[:, 1]]], axis=1)
    return float(np.max(np.abs(la / lr - 1)))


def _largest_component(mesh: TriangleMesh):
    from scipy.sparse.csgraph import connected_components

    from ..mesh import edge_graph

    _, comp = connected_components(edge_graph(mesh), directed=False)
    keep = comp == np.bincount(comp).argmax()
    return mesh.submesh(keep)


def make_partial(mesh: TriangleMesh, kind: str = "CUT", fraction: float = 0.4, seed: int = 0,
                 gt: GroundTruth | None = None, n_holes: int = 5, name: str = ""):
    """Remove roughly ``fraction`` of the surface area.

    CUT removes one geodesic ball around a random vertex (a large part);
    HOLES removes ``n_holes`` smaller balls. Returns ``(partial, kept, gt)``
    where ``kept[i]`` is the original index of partial vertex i.
    """
    name = name or f"{mesh.name}_{kind.lower()}"
    if fraction <= 0:
        kept = np.arange(mesh.n)
        return TriangleMesh(mesh.vertices, mesh.faces, name=name), kept, gt
    if not 0 < fraction < 1:
        raise DataError("fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    area = mesh.face_areas
    total = area.sum()
    if kind == "CUT":
        centres = [int(rng.integers(mesh.n))]
    elif kind == "HOLES":
        centres = _spread_vertices(mesh, n_holes, rng)
    else:
        raise DataError(f"unknown partiality kind {kind!r}")
    dist = geodesic_distances(mesh, np.asarray(centres)).min(axis=0)
    # a face is removed as soon as one vertex is inside the union of balls
    face_key = dist[mesh.faces].min(axis=1)
    order = np.argsort(face_key)
    removed = np.cumsum(area[order]) / total
    cut = int(np.searchsorted(removed, fraction))
    radius = face_key[order[min(cut, len(order) - 1)]]
    keep_vertex = dist >= radius
    partial, kept = mesh.submesh(keep_vertex, name=name)
    if kind == "CUT":
        partial, sub = _largest_component(partial)
        kept = kept[sub]
        partial = TriangleMesh(partial.vertices, partial.faces, name=name)
    elif not is_connected(partial):
        raise DataError("HOLES removal disconnected the mesh; try another seed or fraction")
    new_gt = GroundTruth(gt.labels[kept]) if gt is not None else None
    return partial, kept, new_gt


def _spread_vertices(mesh: TriangleMesh, count: int, rng) -> list:
    chosen = [int(rng.integers(mesh.n))]
    dist = geodesic_distances(mesh, chosen[0]).distances
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, geodesic_distances(mesh, nxt).distances)
    return chosen


def removed_area_fraction(mesh: TriangleMesh, partial: TriangleMesh) -> float:
    return 1.0 - total_area(partial) / total_area(mesh)
