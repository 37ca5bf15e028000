"""Mesh, trajectory and hierarchy file formats (JSON).

Mesh files hold ``positions``, ``cells``, ``node_type`` and ``dim``.
Trajectory files hold ``dt`` and ``fields`` (``name -> [steps][nodes][components]``),
optionally with the mesh inlined under ``mesh``.  Hierarchy files hold a
``levels`` list.  Floats are written with Python's shortest round-trip repr,
and every writer emits sorted keys so re-export is byte-identical.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bistride import Hierarchy, Level, PoolingPlan
from .graph import Adjacency, build_adjacency
from .transition import ContributionTable


class MeshFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    positions: np.ndarray
    cells: list[tuple[int, ...]]
    node_type: np.ndarray

    @property
    def n(self) -> int:
        return int(self.positions.shape[0])

    @property
    def dim(self) -> int:
        return int(self.positions.shape[1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and self.cells == other.cells
            and np.array_equal(self.node_type, other.node_type)
        )


def make_mesh(positions, cells, node_type=None) -> Mesh:
    """Validate and wrap raw arrays."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    if pos.ndim != 2 or pos.shape[1] not in (1, 2, 3):
        raise MeshFormatError(f"positions must be n x dim with dim in 1..3, got shape {pos.shape}")
    if not np.all(np.isfinite(pos)):
        bad = int(np.argmax(~np.isfinite(pos).all(axis=1)))
        raise MeshFormatError(f"node {bad}: non-finite position")
    n = pos.shape[0]
    if n == 0:
        raise MeshFormatError("mesh has no nodes")
    out_cells = []
    for k, cell in enumerate(cells):
        c = tuple(int(v) for v in cell)
        for v in c:
            if v < 0 or v >= n:
                raise MeshFormatError(f"cell {k}: node index {v} out of range [0, {n})")
        if len(set(c)) < 2:
            raise MeshFormatError(f"cell {k}: needs at least 2 distinct nodes")
        out_cells.append(c)
    nt = np.zeros(n, dtype=np.int64) if node_type is None else np.asarray(node_type, dtype=np.int64)
    if nt.shape != (n,):
        raise MeshFormatError(f"node_type must have length {n}")
    return Mesh(pos, out_cells, nt)


def mesh_from_dict(doc: dict) -> Mesh:
    try:
        positions = doc["positions"]
        cells = doc["cells"]
    except (KeyError, TypeError) as exc:
        raise MeshFormatError(f"missing key {exc}") from None
    mesh = make_mesh(positions, cells, doc.get("node_type"))
    dim = doc.get("dim")
    if dim is not None and int(dim) != mesh.dim:
        raise MeshFormatError(f"dim={dim} but positions have {mesh.dim} columns")
    return mesh


def mesh_to_dict(mesh: Mesh) -> dict:
    return {
        "cells": [list(c) for c in mesh.cells],
        "dim": mesh.dim,
        "node_type": mesh.node_type.tolist(),
        "positions": mesh.positions.tolist(),
    }


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: invalid JSON ({exc})") from None


def write_json(path, doc) -> None:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
        fh.write("\n")


def load_mesh(path) -> Mesh:
    return mesh_from_dict(_read_json(path))


def save_mesh(mesh: Mesh, path) -> None:
    write_json(path, mesh_to_dict(mesh))


def _cell_pairs(cell: tuple[int, ...]):
    # segments, triangles and tetrahedra: every node pair is an element edge
    return itertools.combinations(cell, 2)


def mesh_to_graph(mesh: Mesh) -> Adjacency:
    edges = [p for cell in mesh.cells for p in _cell_pairs(cell)]
    return build_adjacency(mesh.n, edges)


@dataclass(eq=False)
class Trajectory:
    """Per-step nodal fields on one mesh.  ``fields[name]`` is steps x nodes x components."""

    mesh: Mesh | None
    fields: dict[str, np.ndarray]
    dt: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return next(iter(self.fields.values())).shape[0] if self.fields else 0

    def validate(self) -> None:
        n = self.mesh.n if self.mesh is not None else None
        steps = None
        for name, arr in self.fields.items():
            if arr.ndim != 3:
                raise MeshFormatError(f"field {name!r} must be steps x nodes x components")
            if n is not None and arr.shape[1] != n:
                raise MeshFormatError(f"field {name!r} has {arr.shape[1]} nodes, mesh has {n}")
            if steps is not None and arr.shape[0] != steps:
                raise MeshFormatError(f"field {name!r} has {arr.shape[0]} steps, expected {steps}")
            steps = arr.shape[0]
            n = arr.shape[1]


def trajectory_from_dict(doc: dict) -> Trajectory:
    if "fields" not in doc:
        raise MeshFormatError("trajectory needs a 'fields' object")
    fields = {}
    for name, data in doc["fields"].items():
        arr = np.asarray(data, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        fields[name] = arr
    mesh = mesh_from_dict(doc["mesh"]) if doc.get("mesh") is not None else None
    traj = Trajectory(mesh, fields, float(doc.get("dt", 1.0)), dict(doc.get("meta", {})))
    traj.validate()
    return traj


def trajectory_to_dict(traj: Trajectory) -> dict:
    doc = {
        "dt": traj.dt,
        "fields": {k: v.tolist() for k, v in sorted(traj.fields.items())},
    }
    if traj.mesh is not None:
        doc["mesh"] = mesh_to_dict(traj.mesh)
    if traj.meta:
        doc["meta"] = traj.meta
    return doc


def load_trajectory(path) -> Trajectory:
    path = os.fspath(path)
    if path.endswith(".jsonl") or path.endswith(".ndjson"):
        return _load_ndjson_trajectory(path)
    return trajectory_from_dict(_read_json(path))


def _load_ndjson_trajectory(path) -> Trajectory:
    """First line: header ``{"dt":..., "mesh":...}``; each later line: ``{name: [nodes][comp]}``."""
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise MeshFormatError(f"{path}: empty trajectory")
    header = json.loads(lines[0])
    steps: dict[str, list] = {}
    for ln in lines[1:]:
        for name, data in json.loads(ln).items():
            steps.setdefault(name, []).append(data)
    header = dict(header)
    header["fields"] = steps
    return trajectory_from_dict(header)


def save_trajectory(traj: Trajectory, path) -> None:
    write_json(path, trajectory_to_dict(traj))


def _edge_list(adj: Adjacency | None):
    return None if adj is None else adj.edges().tolist()


def hierarchy_to_dict(h: Hierarchy) -> dict:
    levels = []
    for lv in h.levels:
        doc = {
            "n": lv.n,
            "edges": _edge_list(lv.adjacency),
            "contact_edges": _edge_list(lv.contact),
            "weights": lv.weights.tolist(),
            "positions": lv.positions.tolist(),
        }
        if lv.plan is not None:
            doc["pooled"] = lv.plan.pooled.tolist()
            doc["seeds"] = lv.plan.seeds.tolist()
            doc["parity"] = lv.plan.parity
            t = lv.table
            doc["transition"] = {"rows": t.rows.tolist(), "cols": t.cols.tolist(), "vals": t.vals.tolist()}
        levels.append(doc)
    return {"levels": levels}


def hierarchy_from_dict(doc: dict) -> Hierarchy:
    levels = []
    for k, d in enumerate(doc["levels"]):
        n = int(d["n"]) if "n" in d else len(d["weights"])
        adj = build_adjacency(n, d["edges"])
        contact = None if d.get("contact_edges") is None else build_adjacency(n, d["contact_edges"])
        pos = np.asarray(d.get("positions", np.zeros((n, 1))), dtype=float).reshape(n, -1)
        plan = table = None
        if "pooled" in d:
            pooled = np.asarray(d["pooled"], dtype=np.int64)
            plan = PoolingPlan(np.asarray(d.get("seeds", []), dtype=np.int64), pooled, d.get("parity", "even"))
            tr = d["transition"]
            table = ContributionTable(
                n,
                pooled,
                np.asarray(tr["rows"], dtype=np.int64),
                np.asarray(tr["cols"], dtype=np.int64),
                np.asarray(tr["vals"], dtype=float),
            )
        levels.append(Level(adj, pos, np.asarray(d["weights"], dtype=float), contact, plan, table))
    return Hierarchy(levels)


def export_hierarchy(h: Hierarchy, path) -> None:
    write_json(path, hierarchy_to_dict(h))


def import_hierarchy(path) -> Hierarchy:
    return hierarchy_from_dict(_read_json(path))
