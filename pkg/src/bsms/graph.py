"""Sparse boolean graph kernels.

Everything here works on compressed-row boolean matrices whose column
indices are sorted within each row.  ``Adjacency`` is the square, symmetric,
diagonal-free specialisation used for mesh graphs at every level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

UNREACHABLE = -1


class GraphError(ValueError):
    """Raised for malformed graph input (bad indices, shape mismatches)."""


def _as_index_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    return arr


@dataclass(frozen=True, eq=False)
class BoolMatrix:
    """Boolean matrix in CSR form (no stored values, only structure)."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def coo(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index arrays of every stored entry, row-major."""
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64), self.degrees())
        return rows, self.indices.copy()

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        r, c = self.coo()
        out[r, c] = True
        return out

    def transpose(self) -> "BoolMatrix":
        r, c = self.coo()
        return BoolMatrix.from_coo((self.shape[1], self.shape[0]), c, r)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BoolMatrix):
            return NotImplemented
        return (
            tuple(self.shape) == tuple(other.shape)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __hash__(self):
        return hash((tuple(self.shape), self.indices.tobytes()))

    @classmethod
    def from_coo(cls, shape, rows, cols) -> "BoolMatrix":
        """Build from (possibly duplicated, unordered) coordinate lists."""
        nrows, ncols = int(shape[0]), int(shape[1])
        rows = _as_index_array(rows)
        cols = _as_index_array(cols)
        if rows.size:
            codes = np.unique(rows * max(ncols, 1) + cols)
            rows, cols = np.divmod(codes, max(ncols, 1))
        indptr = np.zeros(nrows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=nrows), out=indptr[1:])
        return cls((nrows, ncols), indptr, cols.astype(np.int64))

    @classmethod
    def from_dense(cls, dense) -> "BoolMatrix":
        dense = np.asarray(dense, dtype=bool)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape, r, c)

    @classmethod
    def empty(cls, nrows: int, ncols: int | None = None) -> "BoolMatrix":
        ncols = nrows if ncols is None else ncols
        return cls((nrows, ncols), np.zeros(nrows + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @classmethod
    def identity(cls, n: int) -> "BoolMatrix":
        return cls((n, n), np.arange(n + 1, dtype=np.int64), np.arange(n, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class Adjacency(BoolMatrix):
    """Square symmetric boolean adjacency with no stored diagonal."""

    @property
    def n(self) -> int:
        return self.shape[0]

    def edges(self) -> np.ndarray:
        """Undirected edge list ``(i, j)`` with ``i < j``, lexicographic."""
        r, c = self.coo()
        keep = r < c
        return np.stack([r[keep], c[keep]], axis=1)

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(receiver, sender) pairs for every stored entry, receiver-major."""
        return self.coo()

    @classmethod
    def from_matrix(cls, m: BoolMatrix, check: bool = True) -> "Adjacency":
        if m.shape[0] != m.shape[1]:
            raise GraphError(f"adjacency must be square, got {m.shape}")
        adj = cls(m.shape, m.indptr, m.indices)
        if check:
            validate_adjacency(adj)
        return adj

    @classmethod
    def empty(cls, n: int) -> "Adjacency":  # type: ignore[override]
        return cls((n, n), np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))


def validate_adjacency(adj: BoolMatrix) -> None:
    n = adj.shape[0]
    if adj.shape[0] != adj.shape[1]:
        raise GraphError("adjacency must be square")
    if adj.indptr.size != n + 1 or adj.indptr[0] != 0 or adj.indptr[-1] != adj.indices.size:
        raise GraphError("malformed indptr")
    if adj.indices.size and (adj.indices.min() < 0 or adj.indices.max() >= n):
        raise GraphError("column index out of range")
    r, c = adj.coo()
    if np.any(r == c):
        raise GraphError("adjacency stores a diagonal entry")
    # strictly increasing within each row
    same_row = r[1:] == r[:-1]
    if np.any(c[1:][same_row] <= c[:-1][same_row]):
        raise GraphError("row indices not strictly increasing")
    t = adj.transpose()
    if not (np.array_equal(t.indptr, adj.indptr) and np.array_equal(t.indices, adj.indices)):
        raise GraphError("adjacency is not symmetric")


def build_adjacency(n: int, edges: Iterable[Sequence[int]]) -> Adjacency:
    """Symmetrise, deduplicate and drop self-loops from an edge list."""
    if n <= 0:
        raise GraphError("node count must be positive")
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if e.size == 0:
        return Adjacency.empty(n)
    e = e.reshape(-1, 2)
    bad = (e < 0) | (e >= n)
    if bad.any():
        k = int(np.argmax(bad.any(axis=1)))
        raise GraphError(f"edge {k} {tuple(int(v) for v in e[k])} has index out of range [0, {n})")
    e = e[e[:, 0] != e[:, 1]]
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    m = BoolMatrix.from_coo((n, n), rows, cols)
    return Adjacency(m.shape, m.indptr, m.indices)


def _gather_rows(m: BoolMatrix, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the column lists of ``rows``; also return the owning row."""
    starts = m.indptr[rows]
    counts = m.indptr[rows + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(rows.size), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return m.indices[np.repeat(starts, counts) + offsets], owner


def bfs_distances(adj: BoolMatrix, seeds) -> np.ndarray:
    """Multi-source BFS hop counts; ``UNREACHABLE`` (-1) where no seed reaches."""
    seeds = _as_index_array(seeds)
    n = adj.shape[0]
    if seeds.size == 0:
        raise GraphError("bfs_distances needs at least one seed")
    if seeds.min() < 0 or seeds.max() >= n:
        raise GraphError("seed index out of range")
    dist = np.full(n, UNREACHABLE, dtype=np.int64)
    frontier = np.unique(seeds)
    dist[frontier] = 0
    level = 0
    while frontier.size:
        nbrs, _ = _gather_rows(adj, frontier)
        nbrs = nbrs[dist[nbrs] == UNREACHABLE]
        if nbrs.size == 0:
            break
        frontier = np.unique(nbrs)
        level += 1
        dist[frontier] = level
    return dist


def add_identity(m: BoolMatrix) -> BoolMatrix:
    if m.shape[0] != m.shape[1]:
        raise GraphError("self-loops need a square matrix")
    r, c = m.coo()
    d = np.arange(m.shape[0], dtype=np.int64)
    return BoolMatrix.from_coo(m.shape, np.concatenate([r, d]), np.concatenate([c, d]))


def drop_diagonal(m: BoolMatrix) -> BoolMatrix:
    r, c = m.coo()
    keep = r != c
    return BoolMatrix.from_coo(m.shape, r[keep], c[keep])


def bool_product(
    a: BoolMatrix,
    b: BoolMatrix,
    with_self_loops: bool = False,
    drop_diag: bool = False,
) -> BoolMatrix:
    """Boolean product ``a @ b``.

    With ``with_self_loops`` the identity is added to both factors first, so
    ``bool_product(A, A, True)`` marks pairs reachable in at most two hops.
    """
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"dimension mismatch: {a.shape} @ {b.shape}")
    if with_self_loops:
        a = add_identity(a)
        b = add_identity(b)
    shape = (a.shape[0], b.shape[1])
    ar, ac = a.coo()
    cols, owner = _gather_rows(b, ac)
    rows = ar[owner]
    if drop_diag:
        keep = rows != cols
        rows, cols = rows[keep], cols[keep]
    return BoolMatrix.from_coo(shape, rows, cols)


def _check_selector(idx: np.ndarray, bound: int, what: str) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise GraphError(f"{what} index out of range")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise GraphError(f"{what} indices must be strictly increasing")


def stride_submatrix(m: BoolMatrix, rows, cols) -> BoolMatrix:
    """Restrict ``m`` to ``rows`` x ``cols`` and reindex densely in list order."""
    rows = _as_index_array(rows)
    cols = _as_index_array(cols)
    _check_selector(rows, m.shape[0], "row")
    _check_selector(cols, m.shape[1], "column")
    remap = np.full(m.shape[1], -1, dtype=np.int64)
    remap[cols] = np.arange(cols.size)
    picked, owner = _gather_rows(m, rows)
    new_cols = remap[picked]
    keep = new_cols >= 0
    return BoolMatrix.from_coo((rows.size, cols.size), owner[keep], new_cols[keep])


def as_adjacency(m: BoolMatrix) -> Adjacency:
    """Wrap a square symmetric diagonal-free matrix as ``Adjacency``."""
    return Adjacency.from_matrix(m, check=False)


def restrict_adjacency(adj: Adjacency, nodes) -> Adjacency:
    return as_adjacency(stride_submatrix(adj, nodes, nodes))
