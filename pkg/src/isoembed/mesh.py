"""Triangulated OBJ export of two-dimensional map fields."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .grid import GridField


def parse_triple(spec: str | Sequence[int], components: int) -> tuple[int, int, int]:
    """Validate a 1-based coordinate triple such as ``"1,2,3"``."""
    if isinstance(spec, str):
        try:
            spec = [int(s) for s in spec.replace(" ", "").split(",")]
        except ValueError as exc:
            raise ConfigurationError(f"bad coordinate triple {spec!r}") from exc
    spec = tuple(int(s) for s in spec)
    if len(spec) != 3:
        raise ConfigurationError("need exactly three coordinates")
    if len(set(spec)) != 3 or min(spec) < 1 or max(spec) > components:
        raise ConfigurationError(f"coordinates must be distinct and in 1..{components}")
    return spec


def triangulate(f: GridField, triple: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Vertices ``(V, 3)`` at valid points and 0-based triangles ``(F, 3)``.

    Each grid cell whose four corners are valid gives two triangles.
    """
    if f.n != 2 or f.kind != "map":
        raise ConfigurationError("mesh export needs a map on a two-dimensional grid")
    tri = parse_triple(triple, f.components)
    valid = f.valid
    index = np.full(valid.shape, -1, dtype=np.int64)
    index[valid] = np.arange(int(valid.sum()))
    verts = np.stack([f.data[c - 1][valid] for c in tri], axis=1)
    quad = valid[:-1, :-1] & valid[1:, :-1] & valid[1:, 1:] & valid[:-1, 1:]
    a = index[:-1, :-1][quad]
    b = index[1:, :-1][quad]
    c = index[1:, 1:][quad]
    d = index[:-1, 1:][quad]
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return verts, faces


def write_obj(path: str | Path, f: GridField, triple: Sequence[int] = (1, 2, 3)) -> tuple[int, int]:
    """Write ``v``/``f`` records; returns vertex and face counts."""
    verts, faces = triangulate(f, triple)
    with open(path, "w") as fh:
        fh.write(f"# {len(verts)} vertices, {len(faces)} faces\n")
        np.savetxt(fh, verts, fmt="v %.17g %.17g %.17g")
        np.savetxt(fh, faces + 1, fmt="f %d %d %d")
    return len(verts), len(faces)


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and 0-based faces of an OBJ file written by ``write_obj``."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
