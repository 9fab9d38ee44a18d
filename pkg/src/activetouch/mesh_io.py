"""Mesh ingestion (STL, OBJ) and export (OBJ, per-vertex CSV)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh


def _read_stl(data: bytes) -> TriangleMesh:
    is_ascii = data[:5].lower() == b"solid" and b"facet" in data[:1024]
    if is_ascii:
        verts = []
        for line in data.decode("ascii", errors="replace").splitlines():
            parts = line.split()
            if parts and parts[0] == "vertex":
                verts.append([float(v) for v in parts[1:4]])
        v = np.array(verts, dtype=float).reshape(-1, 3)
    else:
        (n,) = struct.unpack("<I", data[80:84])
        rec = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
        arr = np.frombuffer(data, dtype=rec, count=n, offset=84)
        v = arr["v"].reshape(-1, 3).astype(float)
    tris = np.arange(len(v)).reshape(-1, 3)
    return TriangleMesh(v, tris).cleaned()


def _read_obj(text: str) -> TriangleMesh:
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts, dtype=float), np.array(faces, dtype=np.int64)).cleaned()


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".stl":
        return _read_stl(path.read_bytes())
    if suffix == ".obj":
        return _read_obj(path.read_text())
    raise ValueError(f"unsupported mesh format: {path.suffix}")


def save_obj(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")


def save_vertex_csv(values, path, name: str = "variance") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [f"vertex,{name}"] + [f"{i},{float(v):.9g}" for i, v in enumerate(values)]
    path.write_text("\n".join(rows) + "\n")
