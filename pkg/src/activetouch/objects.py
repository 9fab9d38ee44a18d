"""Procedural desk-scale objects, novel variants, and the model-library manifest."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .mesh_io import load_mesh
from .ppf import PpfTable, build_ppf_table, library_digest
from .sdf import ObjectModel, SdfField, SdfSource, build_sdf_grid, make_object_model, primitive_grid

HALF_PI = float(np.pi / 2)

_HANDLE = {"type": "torus", "major": 0.7, "minor": 0.22, "center": [1.7, 0.0, 0.0], "euler": [0.0, 0.0, HALF_PI]}

CATALOG: dict[str, dict] = {
    "box": {"type": "box", "half_extents": [2.0, 1.4, 0.8]},
    "sphere_bump": {"type": "union", "children": [
        {"type": "sphere", "radius": 2.0},
        {"type": "sphere", "radius": 0.6, "center": [0.0, 0.0, 2.0]},
    ]},
    "torus": {"type": "torus", "major": 2.0, "minor": 0.6},
    "l_bracket": {"type": "union", "children": [
        {"type": "box", "half_extents": [1.8, 0.6, 0.4], "center": [0.0, 0.0, -1.2]},
        {"type": "box", "half_extents": [0.4, 0.6, 1.6], "center": [-1.4, 0.0, 0.0]},
    ]},
    "mug": {"type": "union", "children": [
        {"type": "capsule", "a": [0.0, 0.0, -0.6], "b": [0.0, 0.0, 0.6], "radius": 1.2},
        _HANDLE,
    ]},
    # novel variants: each at least 0.8 TWD from every desk shape under the best rigid alignment
    # found by scripts/novel_separation.py (0.825, 0.877, 1.205)
    "mug_tall": {"type": "union", "children": [
        {"type": "capsule", "a": [0.0, 0.0, -1.8], "b": [0.0, 0.0, 1.8], "radius": 1.2},
        _HANDLE,
    ]},
    "box_peg": {"type": "union", "children": [
        {"type": "box", "half_extents": [2.0, 1.4, 0.8]},
        {"type": "capsule", "a": [0.8, 0.0, 0.8], "b": [0.8, 0.0, 2.6], "radius": 0.45},
    ]},
    "torus_bar": {"type": "union", "children": [
        {"type": "torus", "major": 2.0, "minor": 0.6},
        {"type": "box", "half_extents": [0.35, 3.6, 0.35]},
    ]},
}

DESK_SET = ("box", "sphere_bump", "torus", "l_bracket", "mug")
NOVEL_SET = ("mug_tall", "box_peg", "torus_bar")


def primitive_spec(name: str) -> dict:
    if name not in CATALOG:
        raise KeyError(f"unknown object {name!r}")
    return copy.deepcopy(CATALOG[name])


def model_from_entry(entry: dict, class_id: int, base: Path | None = None, resolution: int | None = None,
                     n_features: int = 200) -> ObjectModel:
    """Build an ObjectModel from one manifest entry (primitive spec, catalog name, or mesh file)."""
    base = Path(".") if base is None else Path(base)
    name = entry["name"]
    seed = int(entry.get("seed", 1000 + class_id))
    if "sdf" in entry and (base / entry["sdf"]).exists():
        field = SdfField.load(base / entry["sdf"])
        return make_object_model(class_id, name, field, None, n_features, seed)
    if "mesh" in entry:
        mesh = load_mesh(base / entry["mesh"])
        scale = float(entry.get("scale", 1.0))
        mesh.vertices = mesh.vertices * scale
        source = SdfSource(entry.get("source", SdfSource.MESH.value))
        res = resolution or int(entry.get("resolution", 64 if source is SdfSource.GPIS else 96))
        field = build_sdf_grid(mesh.largest_component(), res, 1.0, source)
        if "sdf" in entry:
            field.save(base / entry["sdf"])
        return make_object_model(class_id, name, field, None, n_features, seed)
    spec = entry.get("primitive") or primitive_spec(name)
    field = primitive_grid(spec, resolution or int(entry.get("resolution", 96)))
    return make_object_model(class_id, name, field, spec, n_features, seed)


def build_model(name: str, class_id: int = 0, resolution: int = 96) -> ObjectModel:
    return model_from_entry({"name": name}, class_id, resolution=resolution)


class Library:
    """Ordered set of prior models plus their PPF table."""

    def __init__(self, models: list[ObjectModel], entries: list[dict] | None = None, path: Path | None = None):
        ids = [m.class_id for m in models]
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        self.models = {m.class_id: m for m in models}
        self.entries = entries or [{"name": m.name} for m in models]
        self.path = path
        self._table: PpfTable | None = None

    def __len__(self):
        return len(self.models)

    def by_name(self, name: str) -> ObjectModel:
        for m in self.models.values():
            if m.name == name:
                return m
        raise KeyError(name)

    @property
    def table(self) -> PpfTable:
        if self._table is None:
            digest = library_digest(self.models.values())
            cache = None if self.path is None else self.path.with_suffix(".ppf.npz")
            table = PpfTable.load(cache, digest) if cache is not None else None
            if table is None:
                table = build_ppf_table(list(self.models.values()))
                if cache is not None:
                    table.save(cache)
            self._table = table
        return self._table

    def save_manifest(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"classes": self.entries}, indent=2) + "\n")
        self.path = path


_CACHE: dict[str, Library] = {}


def load_library(path) -> Library:
    """Load a manifest ``{"classes": [{"name": ..., "primitive"|"mesh"|"sdf": ...}, ...]}``."""
    path = Path(path).resolve()
    text = path.read_text()
    key = f"{path}:{hash(text)}"
    if key not in _CACHE:
        entries = json.loads(text)["classes"]
        models = [model_from_entry(e, i, path.parent) for i, e in enumerate(entries)]
        _CACHE[key] = Library(models, entries, path)
    return _CACHE[key]


def desk_library(names=DESK_SET) -> Library:
    key = "desk:" + ",".join(names)
    if key not in _CACHE:
        entries = [{"name": n} for n in names]
        _CACHE[key] = Library([model_from_entry(e, i) for i, e in enumerate(entries)], entries)
    return _CACHE[key]


def write_desk_manifest(path, names=DESK_SET) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"classes": [{"name": n, "primitive": primitive_spec(n)} for n in names]},
                               indent=2) + "\n")
    return path
