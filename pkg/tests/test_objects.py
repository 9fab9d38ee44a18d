import json

import numpy as np
import pytest

from activetouch.objects import (CATALOG, DESK_SET, NOVEL_SET, Library, desk_library, load_library, primitive_spec,
                                 write_desk_manifest)
from activetouch.sdf import sdf_eval
from activetouch.geometry import Pose


def test_catalog_covers_desk_and_novel_sets():
    assert set(DESK_SET) | set(NOVEL_SET) <= set(CATALOG)
    assert not set(DESK_SET) & set(NOVEL_SET)


def test_primitive_spec_is_a_copy():
    spec = primitive_spec("box")
    spec["half_extents"][0] = 99.0
    assert CATALOG["box"]["half_extents"][0] == 2.0
    with pytest.raises(KeyError):
        primitive_spec("teapot")


def test_desk_library_classes_and_lookup():
    lib = desk_library()
    assert len(lib) == 5
    assert [lib.models[i].name for i in range(5)] == list(DESK_SET)
    assert lib.by_name("torus").class_id == 2
    with pytest.raises(KeyError):
        lib.by_name("mug_tall")
    assert len(lib.table) == 5 * 39800


def test_models_fit_workspace_and_contain_origin_region():
    lib = desk_library()
    for m in lib.models.values():
        P = m.surface_samples(500)
        assert np.abs(P).max() < 5.0
        # the SDF vanishes on its own surface samples (grid interpolation error only)
        assert np.abs(sdf_eval(m, Pose.identity(), P)).max() < 0.1


def test_duplicate_class_ids_rejected():
    m = desk_library().models[0]
    with pytest.raises(ValueError):
        Library([m, m])


def test_manifest_round_trip_and_table_cache(tmp_path):
    path = write_desk_manifest(tmp_path / "lib.json", ("box", "torus"))
    entries = json.loads(path.read_text())["classes"]
    assert [e["name"] for e in entries] == ["box", "torus"]
    lib = load_library(path)
    assert len(lib) == 2 and lib.by_name("torus").class_id == 1
    n = len(lib.table)
    assert n == 2 * 39800
    assert path.with_suffix(".ppf.npz").exists()
    assert load_library(path) is lib
    lib.save_manifest(tmp_path / "copy.json")
    again = load_library(tmp_path / "copy.json")
    assert len(again.table) == n
