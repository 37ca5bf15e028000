"""Steady-state 1-D heat conduction on sticks, and a proximity-coarsened contrast.

Each stick has one end held at a fixed temperature and the other end under a
fixed flux, so the steady profile is linear.  Training uses two mirrored
sticks; testing puts two sticks end to end with a gap smaller than the
element size.  Bi-stride coarsening keeps the two sticks apart at every
level.  Grid pooling with radius-based coarse edges bridges the gap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .bistride import Hierarchy, Level, PoolingPlan, determine_clusters
from .graph import Adjacency, build_adjacency
from .mesh_io import Trajectory, make_mesh
from .transition import contribution_table

FIXED, FLUX, INTERIOR = 0, 1, 2
NODE_TYPES = 3
LEFT, RIGHT = "left", "right"


@dataclass(frozen=True)
class StickConfig:
    nodes: int = 17
    length: float = 1.0
    t0: float = 0.0
    flux: float = 1.0
    orientation: str = LEFT  # side holding the fixed temperature
    gap: float = 1.0 / 64

    def __post_init__(self):
        if self.nodes < 2:
            raise ValueError("a stick needs at least 2 nodes")
        if self.orientation not in (LEFT, RIGHT):
            raise ValueError(f"orientation must be 'left' or 'right', got {self.orientation!r}")
        if not 0 < self.gap < self.spacing:
            raise ValueError(f"gap must lie in (0, {self.spacing}) so it is narrower than an element")

    @property
    def spacing(self) -> float:
        return self.length / (self.nodes - 1)


def analytic_steady_state(cfg: StickConfig) -> np.ndarray:
    """T = T0 + q * (distance from the fixed end), unit conductivity."""
    s = np.arange(cfg.nodes) * cfg.spacing
    t = cfg.t0 + cfg.flux * s
    return t if cfg.orientation == LEFT else t[::-1].copy()


def _stick_inputs(cfg: StickConfig) -> tuple[np.ndarray, np.ndarray]:
    node_type = np.full(cfg.nodes, INTERIOR, dtype=np.int64)
    value = np.zeros(cfg.nodes)
    fixed, flux = (0, cfg.nodes - 1) if cfg.orientation == LEFT else (cfg.nodes - 1, 0)
    node_type[fixed], value[fixed] = FIXED, cfg.t0
    node_type[flux], value[flux] = FLUX, cfg.flux
    return node_type, value


def _sample(sticks: list[StickConfig], meta: dict) -> Trajectory:
    positions, cells, types, values, temps = [], [], [], [], []
    offset, base = 0.0, 0
    for cfg in sticks:
        x = offset + np.arange(cfg.nodes) * cfg.spacing
        positions.append(x)
        cells += [(base + i, base + i + 1) for i in range(cfg.nodes - 1)]
        nt, val = _stick_inputs(cfg)
        types.append(nt)
        values.append(val)
        temps.append(analytic_steady_state(cfg))
        offset = x[-1] + cfg.gap
        base += cfg.nodes
    mesh = make_mesh(np.concatenate(positions)[:, None], cells, np.concatenate(types))
    fields = {
        "boundary": np.concatenate(values)[None, :, None],
        "temperature": np.concatenate(temps)[None, :, None],
    }
    return Trajectory(mesh, fields, dt=1.0, meta=meta)


TEST_LAYOUTS = (
    # (first stick, second stick) orientations; equal orientations are head-to-tail
    (LEFT, LEFT),
    (RIGHT, RIGHT),
    (LEFT, RIGHT),
    (RIGHT, LEFT),
)


def gen_heat1d(split: str, cfg: StickConfig | None = None) -> list[Trajectory]:
    """Training split: two mirrored sticks.  Test split: every pairing of two sticks laid end to end.

    Each trajectory has one step with fields ``boundary`` (input) and
    ``temperature`` (target); ``meta["symmetric"]`` marks test pairs whose
    facing ends share a temperature.
    """
    cfg = cfg or StickConfig()
    if split == "train":
        return [_sample([replace(cfg, orientation=o)], {"orientation": o}) for o in (LEFT, RIGHT)]
    if split == "test":
        out = []
        for a, b in TEST_LAYOUTS:
            ca, cb = replace(cfg, orientation=a), replace(cfg, orientation=b)
            ta, tb = analytic_steady_state(ca), analytic_steady_state(cb)
            meta = {
                "layout": f"{a}-{b}",
                "symmetric": bool(ta[-1] == tb[0]),
                "junction": [cfg.nodes - 2, cfg.nodes - 1, cfg.nodes, cfg.nodes + 1],
            }
            out.append(_sample([ca, cb], meta))
        return out
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def proximity_edges(positions, radius: float, exclude: Adjacency | None = None) -> Adjacency:
    """All node pairs within ``radius`` (Euclidean), minus ``exclude`` and self-pairs."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    pairs = cKDTree(x).query_pairs(radius, output_type="ndarray")
    pairs = pairs.reshape(-1, 2)
    if exclude is not None and pairs.size:
        ex = exclude.to_dense() if exclude.n <= 4096 else None
        if ex is not None:
            pairs = pairs[~ex[pairs[:, 0], pairs[:, 1]]]
        else:
            drop = {(int(a), int(b)) for a, b in exclude.edges()}
            pairs = np.array([p for p in pairs.tolist() if (min(p), max(p)) not in drop], dtype=np.int64).reshape(-1, 2)
    return build_adjacency(x.shape[0], pairs)


def grid_pool(positions, spacing: float, origin=None) -> np.ndarray:
    """Snap every node to its nearest grid point and keep, per occupied grid point, the closest node.

    Ties go to the smallest index.  Returns sorted pooled indices.
    """
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    origin = x.min(axis=0) if origin is None else np.asarray(origin, dtype=float)
    cell = np.rint((x - origin) / spacing).astype(np.int64)
    dist = np.linalg.norm(x - (origin + cell * spacing), axis=1)
    best: dict[tuple, int] = {}
    for i in range(x.shape[0]):
        key = tuple(cell[i])
        j = best.get(key)
        if j is None or dist[i] < dist[j]:
            best[key] = i
    return np.array(sorted(best.values()), dtype=np.int64)


def build_proximity_hierarchy(
    adj: Adjacency,
    positions,
    depth: int,
    spacing: float,
    radius_factor: float = 1.5,
    origin=None,
) -> Hierarchy:
    """Contrast hierarchy: grid pooling with spacing doubling per level, radius-based coarse edges.

    The finest level keeps the mesh edges; level ``l + 1`` pools on a grid of
    spacing ``spacing * 2**l`` and connects pooled nodes closer than
    ``radius_factor`` times that spacing.  Transitions use the same
    contribution tables as bi-stride.
    """
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    origin = x.min(axis=0) if origin is None else origin
    levels = []
    a, w = adj, np.ones(adj.n)
    for lvl in range(depth - 1):
        s = spacing * 2 ** (lvl + 1)
        pooled = grid_pool(x, s, origin)
        table, w_next = contribution_table(a, pooled, w)
        levels.append(Level(a, x, w, None, PoolingPlan(np.zeros(0, dtype=np.int64), pooled, "grid"), table))
        x = x[pooled]
        a = proximity_edges(x, radius_factor * s)
        w = w_next
    levels.append(Level(a, x, w))
    return Hierarchy(levels)


def cluster_labels(adj: Adjacency) -> np.ndarray:
    label = np.empty(adj.n, dtype=np.int64)
    for k, nodes in enumerate(determine_clusters(adj)):
        label[nodes] = k
    return label


def cross_cluster_edges(h: Hierarchy, labels: np.ndarray) -> list[int]:
    """Per level, the number of undirected edges joining different finest-level clusters."""
    counts = []
    lab = np.asarray(labels)
    for lv in h.levels:
        e = lv.adjacency.edges()
        counts.append(int(np.sum(lab[e[:, 0]] != lab[e[:, 1]])) if e.size else 0)
        if lv.plan is not None:
            lab = lab[lv.plan.pooled]
    return counts
