"""Bi-stride pooling and multi-level graph construction.

A level is coarsened by picking one seed per connected cluster, running BFS
from the seeds, and keeping every node on every other BFS frontier.  Each
unpooled node then has a pooled direct neighbour, so squaring the adjacency
(with self-loops) before striding never disconnects the coarse graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .graph import (
    Adjacency,
    BoolMatrix,
    GraphError,
    UNREACHABLE,
    add_identity,
    as_adjacency,
    bfs_distances,
    bool_product,
    drop_diagonal,
    stride_submatrix,
)
from .transition import ContributionTable, contribution_table

log = logging.getLogger(__name__)

EVEN, ODD = "even", "odd"
HEURISTICS = ("minave", "closecenter")


class HierarchyError(ValueError):
    pass


def determine_clusters(adj: Adjacency) -> list[np.ndarray]:
    """Connected components, each sorted, ordered by smallest member."""
    n = adj.n
    label = np.full(n, -1, dtype=np.int64)
    clusters = []
    for start in range(n):
        if label[start] >= 0:
            continue
        reached = np.flatnonzero(bfs_distances(adj, [start]) != UNREACHABLE)
        label[reached] = len(clusters)
        clusters.append(reached)
    return clusters


def _distance_sums(adj: Adjacency, nodes: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Sum of hop distances from each node to all others in its cluster."""
    sub = stride_submatrix(adj, nodes, nodes)
    g = csr_matrix((np.ones(sub.nnz), sub.indices, sub.indptr), shape=sub.shape)
    sums = np.empty(nodes.size)
    for lo in range(0, nodes.size, chunk):
        idx = np.arange(lo, min(lo + chunk, nodes.size))
        d = shortest_path(g, method="D", directed=False, unweighted=True, indices=idx)
        sums[idx] = d.sum(axis=1)
    return sums


def seed_min_ave(adj: Adjacency, clusters: list[np.ndarray] | None = None) -> np.ndarray:
    """Per cluster, the node with the smallest mean hop distance to its cluster.

    Costs one BFS per node.  Ties go to the smallest index.
    """
    clusters = determine_clusters(adj) if clusters is None else clusters
    seeds = []
    for nodes in clusters:
        if nodes.size == 1:
            seeds.append(int(nodes[0]))
            continue
        # integer-valued sums compare exactly, so argmin's first hit is the tie-break
        seeds.append(int(nodes[np.argmin(_distance_sums(adj, nodes))]))
    return np.asarray(seeds, dtype=np.int64)


def seed_close_center(adj: Adjacency, positions, clusters: list[np.ndarray] | None = None) -> np.ndarray:
    """Per cluster, the node nearest the cluster centroid (ties: smallest index)."""
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] != adj.n:
        raise GraphError(f"positions has {positions.shape[0]} rows for {adj.n} nodes")
    if positions.ndim == 1:
        positions = positions[:, None]
    clusters = determine_clusters(adj) if clusters is None else clusters
    seeds = []
    for nodes in clusters:
        x = positions[nodes]
        d = np.linalg.norm(x - x.mean(axis=0), axis=1)
        seeds.append(int(nodes[np.argmin(d)]))
    return np.asarray(seeds, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class PoolingPlan:
    seeds: np.ndarray
    pooled: np.ndarray
    parity: str = EVEN

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoolingPlan):
            return NotImplemented
        return (
            self.parity == other.parity
            and np.array_equal(self.seeds, other.seeds)
            and np.array_equal(self.pooled, other.pooled)
        )


def _check_parity(parity: str) -> int:
    if parity not in (EVEN, ODD):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    return 0 if parity == EVEN else 1


def bistride_pool(
    adj: Adjacency, seeds, parity: str = EVEN, clusters: list[np.ndarray] | None = None
) -> PoolingPlan:
    """Pool every node whose BFS distance from its cluster seed has ``parity``.

    A cluster with no node at the requested parity (a lone node under odd
    parity) keeps its seed, so no cluster disappears.
    """
    want = _check_parity(parity)
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    clusters = determine_clusters(adj) if clusters is None else clusters
    if seeds.size != len(clusters):
        raise HierarchyError(f"expected one seed per cluster ({len(clusters)}), got {seeds.size}")
    owner = np.full(adj.n, -1, dtype=np.int64)
    for k, nodes in enumerate(clusters):
        owner[nodes] = k
    if seeds.size and (seeds.min() < 0 or seeds.max() >= adj.n):
        raise HierarchyError("seed index out of range")
    seen = owner[seeds]
    if np.unique(seen).size != seeds.size:
        missing = sorted(set(range(len(clusters))) - set(seen.tolist()))
        raise HierarchyError(f"clusters {missing} have no seed")
    order = np.argsort(seen, kind="stable")
    seeds = seeds[order]
    dist = bfs_distances(adj, seeds)
    mask = dist % 2 == want
    for k, nodes in enumerate(clusters):
        if not mask[nodes].any():
            mask[seeds[k]] = True
    return PoolingPlan(seeds=seeds, pooled=np.flatnonzero(mask), parity=parity)


def enhance_level(
    adj: Adjacency, contact: Adjacency | None, plan: PoolingPlan | np.ndarray
) -> tuple[Adjacency, Adjacency]:
    """Coarse adjacency and coarse contact adjacency on the pooled nodes.

    ``A' = (A + I)^2`` and ``A'^C = (A + I) A^C (A + I)``, both strided to
    the pooled rows/columns with the diagonal dropped.
    """
    pooled = np.asarray(getattr(plan, "pooled", plan), dtype=np.int64)
    if contact is not None and contact.shape != adj.shape:
        raise GraphError(f"contact shape {contact.shape} != adjacency shape {adj.shape}")
    a2 = bool_product(adj, adj, with_self_loops=True, drop_diag=True)
    coarse = as_adjacency(stride_submatrix(a2, pooled, pooled))
    if contact is None or contact.nnz == 0:
        return coarse, Adjacency.empty(pooled.size)
    a_i = add_identity(adj)
    ac = bool_product(bool_product(a_i, contact), a_i)
    coarse_c = as_adjacency(drop_diagonal(stride_submatrix(ac, pooled, pooled)))
    return coarse, coarse_c


@dataclass(frozen=True, eq=False)
class Level:
    adjacency: Adjacency
    positions: np.ndarray
    weights: np.ndarray
    contact: Adjacency | None = None
    plan: PoolingPlan | None = None
    table: ContributionTable | None = None

    @property
    def n(self) -> int:
        return self.adjacency.n


@dataclass(frozen=True, eq=False)
class Hierarchy:
    levels: list[Level] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def sizes(self) -> list[int]:
        return [lv.n for lv in self.levels]

    @property
    def has_contact(self) -> bool:
        return self.levels[0].contact is not None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Hierarchy) or self.depth != other.depth:
            return False
        for a, b in zip(self.levels, other.levels):
            if not (
                a.adjacency == b.adjacency
                and np.array_equal(a.positions, b.positions)
                and np.array_equal(a.weights, b.weights)
                and (a.contact == b.contact if a.contact is not None else b.contact is None)
                and (a.plan == b.plan if a.plan is not None else b.plan is None)
                and (a.table == b.table if a.table is not None else b.table is None)
            ):
                return False
        return True


def seeds_for(adj: Adjacency, positions, heuristic: str, clusters=None) -> np.ndarray:
    if heuristic == "minave":
        return seed_min_ave(adj, clusters)
    if heuristic == "closecenter":
        return seed_close_center(adj, positions, clusters)
    raise ValueError(f"unknown heuristic {heuristic!r}; expected one of {HEURISTICS}")


def suggest_depth(n: int) -> int:
    """Heuristic level count floor(log2 n) - 3, at least 1."""
    return max(1, int(np.floor(np.log2(max(n, 1)))) - 3)


def build_hierarchy(
    adj: Adjacency,
    positions,
    contact: Adjacency | None = None,
    depth: int = 2,
    heuristic: str = "minave",
    parity: str = EVEN,
    seeder: Callable[[Adjacency, np.ndarray, list[np.ndarray]], np.ndarray] | None = None,
) -> Hierarchy:
    """Coarsen ``adj`` ``depth - 1`` times; seeding is redone on every level.

    ``seeder`` overrides the named heuristic (used to force particular
    seeds, e.g. at a contact endpoint).
    """
    if depth < 1:
        raise HierarchyError("depth must be >= 1")
    _check_parity(parity)
    positions = np.asarray(positions, dtype=float)
    if positions.ndim == 1:
        positions = positions[:, None]
    if positions.shape[0] != adj.n:
        raise GraphError(f"positions has {positions.shape[0]} rows for {adj.n} nodes")
    if contact is not None and contact.shape != adj.shape:
        raise GraphError("contact adjacency shape mismatch")

    levels: list[Level] = []
    a, ac, x, w = adj, contact, positions, np.ones(adj.n)
    for lvl in range(depth - 1):
        clusters = determine_clusters(a)
        seeds = seeder(a, x, clusters) if seeder else seeds_for(a, x, heuristic, clusters)
        plan = bistride_pool(a, seeds, parity, clusters)
        pooled = plan.pooled
        kept = np.zeros(a.n, dtype=bool)
        kept[pooled] = True
        for nodes in clusters:
            if not kept[nodes].any():
                raise HierarchyError(f"level {lvl + 1}: a cluster would vanish at depth {depth}")
        table, w_next = contribution_table(a, pooled, w)
        a_next, ac_next = enhance_level(a, ac, plan)
        levels.append(Level(a, x, w, ac, plan, table))
        log.debug("level %d: %d -> %d nodes", lvl + 1, a.n, pooled.size)
        a, x, w = a_next, x[pooled], w_next
        ac = ac_next if contact is not None else None
    levels.append(Level(a, x, w, ac))
    return Hierarchy(levels)


def check_two_cc(adj: BoolMatrix, pooled) -> list[int]:
    """Unpooled nodes with no pooled direct neighbour (empty when 2-CC holds)."""
    pooled = np.asarray(pooled, dtype=np.int64)
    is_pooled = np.zeros(adj.shape[0], dtype=bool)
    is_pooled[pooled] = True
    bad = []
    for j in np.flatnonzero(~is_pooled):
        if not is_pooled[adj.row(j)].any():
            bad.append(int(j))
    return bad
