"""Versioned ``.npz`` container used for spectral/descriptor caches and checkpoints."""

from __future__ import annotations

import json
import logging
import os
import zipfile
from pathlib import Path

import numpy as np

from .descriptors import SHOT_RADIUS_FRAC, FeatureField, shot
from .errors import ParseError
from .mesh import TriangleMesh
from .spectral import SpectralBasis, mesh_eigenbasis

FORMAT_VERSION = 1
log = logging.getLogger(__name__)


def save_container(path, meta: dict, arrays: dict) -> None:
    """Atomically write arrays plus a JSON metadata block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {f"a/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps({"version": FORMAT_VERSION, **meta}, sort_keys=True).encode(), dtype=np.uint8
    )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_container(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {k[2:]: z[k] for k in z.files if k.startswith("a/")}
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise ParseError(f"{path}: unreadable container") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise ParseError(f"{path}: container version {meta.get('version')} != {FORMAT_VERSION}")
    return meta, arrays


def _fresh(path: Path, expect: dict):
    if not path.exists():
        return None
    try:
        meta, arrays = load_container(path)
    except ParseError:
        return None
    if any(meta.get(k) != v for k, v in expect.items()):
        return None
    return arrays


def cached_basis(mesh: TriangleMesh, k: int, cache_dir=None, stats: dict | None = None) -> SpectralBasis:
    """Spectral basis, read from ``cache_dir`` when the mesh hash and k match."""
    if cache_dir is None:
        return mesh_eigenbasis(mesh, k)
    expect = {"kind": "spectral", "mesh": mesh.digest(), "k": k}
    path = Path(cache_dir) / f"{mesh.name or mesh.digest()[:12]}.spectral.npz"
    arrays = _fresh(path, expect)
    if arrays is not None:
        log.info("cached %s", path.name)
        if stats is not None:
            stats["cached"] = stats.get("cached", 0) + 1
        return SpectralBasis(arrays["evecs"], arrays["evals"], arrays["mass"])
    basis = mesh_eigenbasis(mesh, k)
    save_container(path, expect, {"evecs": basis.evecs, "evals": basis.evals, "mass": basis.mass})
    if stats is not None:
        stats["computed"] = stats.get("computed", 0) + 1
    return basis


def cached_shot(mesh: TriangleMesh, radius_frac: float = SHOT_RADIUS_FRAC, cache_dir=None,
                stats: dict | None = None, radius: float | None = None) -> FeatureField:
    if cache_dir is None:
        return shot(mesh, radius_frac, radius)
    expect = {"kind": "SHOT", "mesh": mesh.digest(), "radius_frac": radius_frac,
              "radius": None if radius is None else float(radius)}
    path = Path(cache_dir) / f"{mesh.name or mesh.digest()[:12]}.shot.npz"
    arrays = _fresh(path, expect)
    if arrays is not None:
        log.info("cached %s", path.name)
        if stats is not None:
            stats["cached"] = stats.get("cached", 0) + 1
        return FeatureField(arrays["values"], "SHOT", {"radius_frac": radius_frac, "radius": radius},
                            arrays["flagged"])
    feat = shot(mesh, radius_frac, radius)
    save_container(path, expect, {"values": feat.values, "flagged": feat.flagged})
    if stats is not None:
        stats["computed"] = stats.get("computed", 0) + 1
    return feat
