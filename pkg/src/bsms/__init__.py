"""Bi-stride multi-scale graph hierarchies and message-passing networks for mesh simulation."""

from .bistride import (
    Hierarchy,
    Level,
    PoolingPlan,
    bistride_pool,
    build_hierarchy,
    determine_clusters,
    enhance_level,
    seed_close_center,
    seed_min_ave,
)
from .graph import Adjacency, BoolMatrix, bfs_distances, bool_product, build_adjacency, stride_submatrix
from .transition import ContributionTable, contribution_table, downsample, upsample

__version__ = "0.1.0"

__all__ = [
    "Adjacency",
    "BoolMatrix",
    "ContributionTable",
    "Hierarchy",
    "Level",
    "PoolingPlan",
    "bfs_distances",
    "bistride_pool",
    "bool_product",
    "build_adjacency",
    "build_hierarchy",
    "contribution_table",
    "determine_clusters",
    "downsample",
    "enhance_level",
    "seed_close_center",
    "seed_min_ave",
    "stride_submatrix",
    "upsample",
]
