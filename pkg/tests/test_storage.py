import os

import numpy as np
import pandas as pd
import pytest

from core.errors import ConfigError
from core.indices import solve_indices
from core.model import generate_tiny, preset_appendixK
from core.sim import trace_stream
from core.storage import (SCHEMAS, dump_instance, load_instance, manifest_hash, read_csv, read_csv_header,
                          read_index_table, write_csv, write_index_table, write_trace)

DATA = os.path.join(os.path.dirname(__file__), "..", "data")


def test_schema_columns_pinned():
    assert SCHEMAS["metrics"] == (1, ["policy", "replications", "cap_hit", "L", "L_ci", "E", "E_ci", "efficiency",
                                      "efficiency_ci", "completion_throughput", "total_blocking",
                                      "blocking_by_class", "z_deviation", "relative_difference"])
    assert SCHEMAS["plot"][1][:3] == ["policy", "bin_start", "bin_end"]
    assert SCHEMAS["cdf"] == (1, ["pair", "seed", "relative_difference", "cdf"])
    assert SCHEMAS["efit"] == (1, ["e", "gamma"])


def test_shipped_preset_matches_generator():
    shipped = load_instance(os.path.join(DATA, "appendix_k.yaml"))
    built = preset_appendixK()
    assert shipped.scaling == built.scaling and shipped.num_classes == built.num_classes
    for a, b in zip(shipped.clusters, built.clusters):
        assert np.allclose(a.service_rates, b.service_rates, rtol=1e-9, atol=1e-12)
        assert np.allclose(a.energy_rates, b.energy_rates, rtol=1e-9, atol=1e-12)
    for a, b in zip(shipped.classes, built.classes):
        assert a.eligible_clusters == b.eligible_clusters
        assert abs(a.arrival_rate_base - b.arrival_rate_base) < 1e-9


def test_instance_roundtrip(tmp_path):
    inst = generate_tiny(4)
    path = str(tmp_path / "inst.yaml")
    dump_instance(inst, path)
    assert load_instance(path) == inst


def test_load_instance_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_instance(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema: farm-instance/v9\n")
    with pytest.raises(ConfigError):
        load_instance(str(bad))
    broken = tmp_path / "broken.yaml"
    broken.write_text("clusters:\n  - id: 1\n")
    with pytest.raises(ConfigError):
        load_instance(str(broken))


def test_index_table_roundtrip(tmp_path):
    inst = preset_appendixK(capacity=3, scaling=2)
    table = solve_indices(inst, 4.0, epsilon=1e-12)
    path = str(tmp_path / "indices.txt")
    write_index_table(table, path)
    back = read_index_table(path, inst)
    assert back.e == 4.0 and back.h == 2.0
    for a, b in zip(table.eta0, back.eta0):
        assert np.array_equal(a, b)
    text = open(path).read()
    assert "u_4" in text and "nan" in text


def test_index_table_wrong_instance(tmp_path):
    inst = preset_appendixK(capacity=3, scaling=2)
    path = str(tmp_path / "indices.txt")
    write_index_table(solve_indices(inst, 4.0, epsilon=1e-12), path)
    with pytest.raises(ConfigError):
        read_index_table(path, preset_appendixK(capacity=2, scaling=2))


def test_write_csv_header_and_manifest(tmp_path):
    df = pd.DataFrame({"gamma": [0.5, -0.25], "e": [0.0, 1.0], "extra": [1, 2]})
    path = str(tmp_path / "out" / "efit.csv")
    manifest = {"command": "efit", "seed": 1}
    digest = write_csv(df, path, "efit", manifest)
    assert digest == manifest_hash(manifest) and len(digest) == 16
    assert read_csv_header(path) == {"schema": "efit/v1", "manifest": digest}
    back = read_csv(path)
    assert list(back.columns) == ["e", "gamma"]
    assert list(back.gamma) == [0.5, -0.25]
    assert os.path.exists(path + ".manifest.json")


def test_write_csv_missing_columns(tmp_path):
    with pytest.raises(ValueError):
        write_csv(pd.DataFrame({"e": [1.0]}), str(tmp_path / "x.csv"), "efit", {})


def test_manifest_hash_stable():
    assert manifest_hash({"a": 1, "b": [1, 2]}) == manifest_hash({"b": [1, 2], "a": 1})
    assert manifest_hash({"a": 1}) != manifest_hash({"a": 2})


def test_trace_write_read(tmp_path):
    path = str(tmp_path / "trace.csv")
    write_trace([(0.5, 0), (1.25, 1)], path)
    assert trace_stream(path) == [(0.5, 0), (1.25, 1)]
    assert trace_stream(os.path.join(DATA, "sample_trace.csv")) == [(0.5, 0), (1.25, 1)]
