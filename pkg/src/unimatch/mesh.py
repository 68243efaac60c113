"""Triangle meshes: file I/O, areas, edge graph and graph geodesics."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import DegenerateError, DisconnectedError, ParseError, TopologyError


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : array-like, shape=[n, 3]
    faces : array-like, shape=[m, 3]
        0-based vertex indices.
    name : str, optional
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""
    nonmanifold_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise TopologyError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise TopologyError(f"faces must be (m, 3), got {f.shape}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "nonmanifold_edges", _validate(v, f))
        if len(self.nonmanifold_edges):
            warnings.warn(
                f"mesh {self.name!r} has {len(self.nonmanifold_edges)} non-manifold edges",
                stacklevel=3,
            )

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def is_manifold(self) -> bool:
        return len(self.nonmanifold_edges) == 0

    @cached_property
    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape=[e, 2], with ``i < j``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        v = self.vertices
        f = self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # |fn| = 2 * area
        vn = np.zeros_like(v)
        for c in range(3):
            np.add.at(vn, f[:, c], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(norm > 0, norm, 1.0)

    def digest(self) -> str:
        """Content hash used to key caches."""
        h = hashlib.sha1()
        h.update(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()

    def submesh(self, keep: np.ndarray, name: str = "") -> tuple["TriangleMesh", np.ndarray]:
        """Restrict to the faces whose three vertices are all kept.

        Returns the new mesh and, for each of its vertices, the index in ``self``.
        Vertices left without any face are dropped.
        """
        keep = np.asarray(keep, dtype=bool)
        fmask = keep[self.faces].all(axis=1)
        faces = self.faces[fmask]
        used = np.unique(faces)
        remap = -np.ones(self.n, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[faces], name=name or self.name), used


def _validate(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    n = len(v)
    if not np.all(np.isfinite(v)):
        raise TopologyError("non-finite vertex coordinates")
    if len(f) == 0:
        raise TopologyError("mesh has no faces")
    if f.min() < 0 or f.max() >= n:
        raise TopologyError(f"face index out of range [0, {n})")
    if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise TopologyError("degenerate face repeats a vertex")
    referenced = np.zeros(n, dtype=bool)
    referenced[f.ravel()] = True
    if not referenced.all():
        raise TopologyError(f"{int((~referenced).sum())} vertices not referenced by any face")
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts > 2]


def total_area(mesh: TriangleMesh) -> float:
    area = float(mesh.face_areas.sum())
    if area <= 0.0:
        raise DegenerateError("all faces have zero area")
    return area


def edge_graph(mesh: TriangleMesh) -> sp.csr_matrix:
    """Symmetric sparse adjacency with Euclidean edge lengths."""
    i, j = mesh.edges.T
    w = np.linalg.norm(mesh.vertices[i] - mesh.vertices[j], axis=1)
    g = sp.coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(mesh.n, mesh.n))
    return g.tocsr()


def is_connected(mesh: TriangleMesh) -> bool:
    ncomp, _ = connected_components(edge_graph(mesh), directed=False)
    return ncomp == 1


@dataclass(frozen=True)
class GeodesicField:
    source: int
    distances: np.ndarray


def geodesic_distances(mesh: TriangleMesh, source) -> GeodesicField | np.ndarray:
    """Dijkstra distances on the edge graph divided by ``sqrt(total_area)``.

    ``source`` may be a single vertex (returns a :class:`GeodesicField`) or a
    sequence of vertices (returns an array of shape [len(source), n]).
    """
    scale = np.sqrt(total_area(mesh))
    single = np.ndim(source) == 0
    src = np.atleast_1d(np.asarray(source, dtype=np.int64))
    if src.min() < 0 or src.max() >= mesh.n:
        raise TopologyError("source vertex out of range")
    d = dijkstra(edge_graph(mesh), directed=False, indices=src)
    if not np.all(np.isfinite(d)):
        raise DisconnectedError("mesh is disconnected; some vertices unreachable")
    d = d / scale
    if single:
        return GeodesicField(int(src[0]), d[0])
    return d


def all_pairs_geodesics(mesh: TriangleMesh) -> np.ndarray:
    return geodesic_distances(mesh, np.arange(mesh.n))


# ---------------------------------------------------------------------------
# file formats


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Read an OFF or ASCII PLY file. The format defaults to the file suffix."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "off":
        v, f = _read_off(path)
    elif fmt == "ply":
        v, f = _read_ply(path)
    else:
        raise ParseError(f"unsupported mesh format {fmt!r}")
    return TriangleMesh(v, f, name=path.stem)


def _tokens(path: Path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not an ASCII file") from exc
    lines = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return lines


def _read_off(path: Path):
    lines = _tokens(path)
    if not lines:
        raise ParseError(f"{path}: empty file")
    head = lines[0].split()
    if head[0] != "OFF":
        raise ParseError(f"{path}: missing OFF header")
    rest = head[1:]
    idx = 1
    if not rest:
        rest = lines[1].split()
        idx = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
        verts = np.array([lines[idx + i].split()[:3] for i in range(nv)], dtype=np.float64)
        faces = []
        for i in range(nf):
            tok = lines[idx + nv + i].split()
            k = int(tok[0])
            if k != 3:
                raise ParseError(f"{path}: only triangular faces supported (got {k}-gon)")
            faces.append([int(t) for t in tok[1:4]])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed OFF body") from exc
    return verts.reshape(nv, 3), np.array(faces, dtype=np.int64).reshape(nf, 3)


def _read_ply(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(512)
    if b"format binary" in head:
        raise ParseError(f"{path}: binary PLY is not supported, convert to ASCII")
    lines = _tokens(path)
    if not lines or lines[0] != "ply":
        raise ParseError(f"{path}: missing ply magic")
    elements = []
    i = 1
    try:
        while lines[i] != "end_header":
            tok = lines[i].split()
            if tok[0] == "format" and tok[1] != "ascii":
                raise ParseError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            i += 1
    except IndexError as exc:
        raise ParseError(f"{path}: unterminated PLY header") from exc
    i += 1
    verts = faces = None
    try:
        for name, count, props in elements:
            body = lines[i:i + count]
            if len(body) != count:
                raise ParseError(f"{path}: truncated {name} block")
            i += count
            if name == "vertex":
                names = [p[-1] for p in props]
                cols = [names.index(c) for c in ("x", "y", "z")]
                verts = np.array([[float(r.split()[c]) for c in cols] for r in body])
            elif name == "face":
                faces = []
                for r in body:
                    tok = r.split()
                    if int(tok[0]) != 3:
                        raise ParseError(f"{path}: only triangular faces supported")
                    faces.append([int(t) for t in tok[1:4]])
                faces = np.array(faces, dtype=np.int64)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PLY body") from exc
    if verts is None or faces is None:
        raise ParseError(f"{path}: PLY needs vertex and face elements")
    return verts.reshape(-1, 3), faces.reshape(-1, 3)


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    v, f = mesh.vertices, mesh.faces
    with open(path, "w") as fh:
        if fmt == "off":
            fh.write(f"OFF\n{len(v)} {len(f)} 0\n")
        elif fmt == "ply":
            fh.write(
                "ply\nformat ascii 1.0\n"
                f"element vertex {len(v)}\nproperty double x\nproperty double y\nproperty double z\n"
                f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
            )
        else:
            raise ParseError(f"unsupported mesh format {fmt!r}")
        for p in v:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for t in f:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


# ---------------------------------------------------------------------------
# procedural meshes


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere (642 vertices at level 3)."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriangleMesh(radius * np.array(verts), np.array(faces), name="icosphere")


def grid_mesh(nx: int, ny: int, spacing: float = 1.0) -> TriangleMesh:
    """Flat ``nx`` by ``ny`` vertex grid in the z=0 plane, each quad split in two."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    v = np.c_[xs.ravel(), ys.ravel(), np.zeros(nx * ny)]
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    f = np.r_[np.c_[a, b, c], np.c_[a, c, d]]
    return TriangleMesh(v, f, name="grid")
