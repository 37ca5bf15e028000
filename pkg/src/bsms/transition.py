"""Non-parametric transitions between adjacent hierarchy levels.

Downsampling aggregates fine-level rows into pooled receivers with a
column-stochastic contribution table; upsampling returns coarse rows through
the same table.  Two ablation modes are available: ``none`` (plain
stride/scatter) and ``graphconv`` (one row-normalised convolution).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import Adjacency, GraphError, add_identity

MODES = ("weighted", "none", "graphconv")


@dataclass(frozen=True, eq=False)
class ContributionTable:
    """Sparse ``|V_l| x |V_{l+1}|`` table; entry (i, j) is sender i's share in receiver j.

    Triplets are stored row-major.  ``pooled[j]`` is the fine index of
    receiver ``j``.
    """

    n_fine: int
    pooled: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    @property
    def n_coarse(self) -> int:
        return int(self.pooled.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_fine, self.n_coarse)

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, ContributionTable):
            return NotImplemented
        return (
            self.n_fine == other.n_fine
            and np.array_equal(self.pooled, other.pooled)
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.vals, other.vals)
        )


def _row_normalized(adj: Adjacency) -> sp.csr_matrix:
    t = add_identity(adj)
    deg = np.diff(t.indptr).astype(float)
    vals = np.repeat(1.0 / deg, np.diff(t.indptr))
    return sp.csr_matrix((vals, t.indices, t.indptr), shape=t.shape)


def contribution_table(adj: Adjacency, pooled, weights) -> tuple[ContributionTable, np.ndarray]:
    """Build the contribution table and the aggregated coarse weights.

    The transition adjacency includes self-loops, so every pooled receiver
    has at least itself as a sender.
    """
    pooled = np.asarray(getattr(pooled, "pooled", pooled), dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    n = adj.n
    if weights.shape != (n,):
        raise GraphError(f"weights must have length {n}, got {weights.shape}")
    if np.any(weights <= 0):
        raise ValueError("node weights must be positive")
    t = add_identity(adj)
    deg = np.diff(t.indptr).astype(float)
    senders = np.repeat(np.arange(n, dtype=np.int64), np.diff(t.indptr))
    receivers_fine = t.indices
    col_of = np.full(n, -1, dtype=np.int64)
    col_of[pooled] = np.arange(pooled.size)
    cols = col_of[receivers_fine]
    keep = cols >= 0
    rows = senders[keep]
    cols = cols[keep]
    w_hat = weights[rows] / deg[rows]
    coarse_w = np.zeros(pooled.size)
    # fixed accumulation order: row-major
    np.add.at(coarse_w, cols, w_hat)
    if np.any(coarse_w <= 0):
        raise AssertionError("pooled receiver without senders")
    vals = w_hat / coarse_w[cols]
    return ContributionTable(n, pooled, rows, cols, vals), coarse_w


def _selection(table: ContributionTable) -> sp.csr_matrix:
    """Coarse x fine 0/1 matrix picking the pooled rows."""
    m = table.n_coarse
    return sp.csr_matrix(
        (np.ones(m), (np.arange(m), table.pooled)), shape=(m, table.n_fine)
    )


def transition_operators(
    table: ContributionTable, mode: str = "weighted", adj: Adjacency | None = None
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Linear maps ``(down, up)`` with ``down @ V`` and ``up @ V'``.

    ``down`` is coarse x fine and ``up`` is fine x coarse.  All three modes
    are linear in the features, which lets the model backpropagate through
    them with the transposes.
    """
    if mode == "weighted":
        c = table.matrix()
        return c.T.tocsr(), c
    if mode == "none":
        s = _selection(table)
        return s, s.T.tocsr()
    if mode == "graphconv":
        if adj is None:
            raise ValueError("graphconv transition needs the level adjacency")
        a_hat = _row_normalized(adj)
        s = _selection(table)
        return (s @ a_hat).tocsr(), (a_hat @ s.T).tocsr()
    raise ValueError(f"unknown transition mode {mode!r}; expected one of {MODES}")


def downsample(v, table: ContributionTable, mode: str = "weighted", adj: Adjacency | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != table.n_fine:
        raise GraphError(f"feature rows {v.shape[0]} != table rows {table.n_fine}")
    down, _ = transition_operators(table, mode, adj)
    return np.asarray(down @ v)


def upsample(v_coarse, table: ContributionTable, mode: str = "weighted", adj: Adjacency | None = None) -> np.ndarray:
    v_coarse = np.asarray(v_coarse, dtype=float)
    if v_coarse.shape[0] != table.n_coarse:
        raise GraphError(f"feature rows {v_coarse.shape[0]} != table columns {table.n_coarse}")
    _, up = transition_operators(table, mode, adj)
    return np.asarray(up @ v_coarse)
