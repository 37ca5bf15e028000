from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from scipy.spatial import Delaunay

from bsms.graph import build_adjacency
from bsms.mesh_io import make_mesh


def path_graph(n):
    return build_adjacency(n, [(i, i + 1) for i in range(n - 1)]) if n > 1 else build_adjacency(1, [])


def path_mesh(n, spacing=1.0):
    return make_mesh(np.arange(n, dtype=float)[:, None] * spacing, [(i, i + 1) for i in range(n - 1)])


def grid_mesh(nx, ny, jitter=0.0, rng=None):
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if jitter:
        pos = pos + rng.uniform(-jitter, jitter, size=pos.shape)
    cells = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = i * ny + j, (i + 1) * ny + j, (i + 1) * ny + j + 1, i * ny + j + 1
            cells += [(a, b, c), (a, c, d)]
    return make_mesh(pos, cells)


def random_triangulation(rng, n, dim=2):
    pts = rng.uniform(0.0, 1.0, size=(n, dim))
    tri = Delaunay(pts)
    return make_mesh(pts, [tuple(s) for s in tri.simplices])


def random_connected_mesh(rng, n_max=2000):
    """A path, a jittered grid, or a 2-D/3-D Delaunay mesh (all connected)."""
    kind = rng.integers(4)
    if kind == 0:
        return path_mesh(int(rng.integers(2, n_max + 1)))
    if kind == 1:
        side = int(rng.integers(2, int(np.sqrt(n_max)) + 1))
        return grid_mesh(side, int(rng.integers(2, max(3, n_max // side) + 1)), 0.2, rng)
    if kind == 2:
        return random_triangulation(rng, int(rng.integers(4, n_max + 1)))
    return random_triangulation(rng, int(rng.integers(5, min(n_max, 400) + 1)), dim=3)


def bfs_oracle(neighbors: list[list[int]], s: int) -> list[int]:
    """Plain queue BFS from one source; -1 where unreachable."""
    dist = [-1] * len(neighbors)
    dist[s] = 0
    q = deque([s])
    while q:
        u = q.popleft()
        for v in neighbors[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def neighbor_lists(adj):
    return [adj.row(i).tolist() for i in range(adj.n)]


def components_oracle(adj):
    nb = neighbor_lists(adj)
    seen, comps = set(), []
    for s in range(adj.n):
        if s in seen:
            continue
        comp = sorted(i for i, d in enumerate(bfs_oracle(nb, s)) if d >= 0)
        seen.update(comp)
        comps.append(comp)
    return comps


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
