import json

import numpy as np
import pytest

from bsms.bistride import build_hierarchy
from bsms.graph import build_adjacency
from bsms.mesh_io import (
    MeshFormatError,
    Trajectory,
    export_hierarchy,
    import_hierarchy,
    load_mesh,
    load_trajectory,
    make_mesh,
    mesh_to_graph,
    save_mesh,
    save_trajectory,
)

from conftest import path_graph, random_connected_mesh


def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_load_segment(tmp_path):
    m = load_mesh(write(tmp_path / "m.json", {"positions": [[0.0], [1.0]], "cells": [[0, 1]], "dim": 1}))
    assert m.n == 2 and len(m.cells) == 1
    assert m.node_type.tolist() == [0, 0]


def test_load_triangle(tmp_path):
    m = load_mesh(write(tmp_path / "t.json", {"positions": [[0, 0], [1, 0], [0, 1]], "cells": [[0, 1, 2]]}))
    assert m.positions.shape == (3, 2)


@pytest.mark.parametrize(
    "doc, needle",
    [
        ({"positions": [[0.0], [1.0]], "cells": [[0, 2]]}, "cell 0"),
        ({"positions": [[0.0], [1.0]], "cells": [[1, 1]]}, "cell 0"),
        ({"positions": [[0.0], [float("nan")]], "cells": [[0, 1]]}, "node 1"),
        ({"positions": [[0.0], [1.0]]}, "cells"),
        ({"positions": [[0.0], [1.0]], "cells": [[0, 1]], "dim": 2}, "dim"),
    ],
)
def test_load_errors(tmp_path, doc, needle):
    with pytest.raises(MeshFormatError, match=needle):
        load_mesh(write(tmp_path / "bad.json", doc))


def test_invalid_json(tmp_path):
    (tmp_path / "x.json").write_text("{nope")
    with pytest.raises(MeshFormatError):
        load_mesh(tmp_path / "x.json")


@pytest.mark.parametrize(
    "n, cells, edges",
    [
        (3, [(0, 1, 2)], [[0, 1], [0, 2], [1, 2]]),
        (4, [(0, 1, 2, 3)], [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]),
        (4, [(0, 1, 2), (1, 2, 3)], [[0, 1], [0, 2], [1, 2], [1, 3], [2, 3]]),
    ],
)
def test_mesh_to_graph(n, cells, edges):
    assert mesh_to_graph(make_mesh(np.zeros((n, 3)), cells)).edges().tolist() == edges


def test_graph_symmetric_no_diagonal(rng):
    for _ in range(20):
        d = mesh_to_graph(random_connected_mesh(rng, 300)).to_dense()
        assert np.array_equal(d, d.T) and not d.diagonal().any()


def test_mesh_roundtrip(tmp_path, rng):
    for k in range(5):
        m = random_connected_mesh(rng, 100)
        m = make_mesh(m.positions, m.cells, rng.integers(0, 3, m.n))
        save_mesh(m, tmp_path / f"m{k}.json")
        assert load_mesh(tmp_path / f"m{k}.json") == m


def test_trajectory_roundtrip(tmp_path):
    mesh = make_mesh([[0.0], [0.1], [0.3]], [(0, 1), (1, 2)])
    traj = Trajectory(mesh, {"u": np.arange(12.0).reshape(2, 3, 2) / 7}, dt=0.01, meta={"a": 1})
    save_trajectory(traj, tmp_path / "t.json")
    back = load_trajectory(tmp_path / "t.json")
    assert back.mesh == mesh and back.dt == 0.01 and back.meta == {"a": 1}
    assert np.array_equal(back.fields["u"], traj.fields["u"])


def test_trajectory_ndjson(tmp_path):
    lines = [{"dt": 0.5}, {"u": [[1.0], [2.0]]}, {"u": [[3.0], [4.0]]}]
    (tmp_path / "t.jsonl").write_text("\n".join(json.dumps(x) for x in lines) + "\n")
    t = load_trajectory(tmp_path / "t.jsonl")
    assert t.fields["u"].shape == (2, 2, 1) and t.dt == 0.5


def test_trajectory_inconsistent(tmp_path):
    doc = {"dt": 1.0, "fields": {"u": [[[1.0], [2.0]]], "v": [[[1.0]]]}}
    with pytest.raises(MeshFormatError):
        load_trajectory(write(tmp_path / "t.json", doc))


def test_hierarchy_roundtrip_p4(tmp_path):
    h = build_hierarchy(path_graph(4), np.arange(4.0), depth=2)
    export_hierarchy(h, tmp_path / "h.json")
    back = import_hierarchy(tmp_path / "h.json")
    assert back == h
    export_hierarchy(back, tmp_path / "h2.json")
    assert (tmp_path / "h.json").read_bytes() == (tmp_path / "h2.json").read_bytes()


def test_hierarchy_single_level(tmp_path):
    export_hierarchy(build_hierarchy(path_graph(3), np.arange(3.0), depth=1), tmp_path / "h.json")
    doc = json.loads((tmp_path / "h.json").read_text())
    assert len(doc["levels"]) == 1 and "transition" not in doc["levels"][0]


def test_hierarchy_roundtrip_fuzz(tmp_path, rng):
    for k in range(8):
        mesh = random_connected_mesh(rng, 300)
        adj = mesh_to_graph(mesh)
        contact = build_adjacency(adj.n, rng.integers(0, adj.n, size=(4, 2))) if k % 2 else None
        h = build_hierarchy(adj, mesh.positions, contact=contact, depth=3)
        export_hierarchy(h, tmp_path / "h.json")
        back = import_hierarchy(tmp_path / "h.json")
        assert back == h
        export_hierarchy(back, tmp_path / "h2.json")
        assert (tmp_path / "h.json").read_bytes() == (tmp_path / "h2.json").read_bytes()
