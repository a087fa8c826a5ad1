"""Weighted leader-follower communication digraphs.

``adjacency[i, j] > 0`` means information flows from node ``j`` to node
``i``; the separate pinning vector carries the direct leader-to-follower
gains.  Every downstream module (error dynamics, learning, validation)
reads the topology exclusively through this module, and every stacked
vector ordering follows the ascending-neighbor convention fixed here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Digraph", "in_degree", "laplacian", "neighbors", "is_strongly_connected"]


@dataclass(frozen=True)
class Digraph:
    """Follower adjacency matrix plus leader pinning gains."""

    adjacency: np.ndarray
    pinning: np.ndarray

    def __post_init__(self) -> None:
        adj = np.array(self.adjacency, dtype=float)
        pin = np.array(self.pinning, dtype=float).reshape(-1)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        if pin.shape[0] != adj.shape[0]:
            raise ValueError("pinning length must match adjacency size")
        if np.any(np.diag(adj) != 0.0):
            raise ValueError("self loops are not allowed (adjacency diagonal must be zero)")
        if np.any(adj < 0.0) or np.any(pin < 0.0):
            raise ValueError("edge weights and pinning gains must be non-negative")
        if not np.any(pin > 0.0):
            raise ValueError("at least one pinning gain must be positive")
        adj.setflags(write=False)
        pin.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "pinning", pin)

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]


def _check_index(g: Digraph, i: int) -> None:
    if not 0 <= i < g.node_count:
        raise IndexError(f"node index {i} out of range for {g.node_count} nodes")


def in_degree(g: Digraph, i: int) -> float:
    """Sum of incoming edge weights of node ``i``."""
    _check_index(g, i)
    return float(g.adjacency[i].sum())


def laplacian(g: Digraph) -> np.ndarray:
    """In-degree matrix minus adjacency matrix; rows sum to zero."""
    return np.diag(g.adjacency.sum(axis=1)) - g.adjacency


def neighbors(g: Digraph, i: int) -> list[int]:
    """Nodes feeding node ``i``, in ascending index order."""
    _check_index(g, i)
    return [int(j) for j in np.flatnonzero(g.adjacency[i] > 0.0)]


def is_strongly_connected(g: Digraph) -> bool:
    """True iff every ordered node pair is joined by a positive-weight path."""
    mask = g.adjacency > 0.0
    return _reaches_all(mask, 0) and _reaches_all(mask.T, 0)


def _reaches_all(mask: np.ndarray, start: int) -> bool:
    # mask[i, j] is the edge j -> i, so moving forward from node j means
    # scanning column j.
    seen = np.zeros(mask.shape[0], dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        j = stack.pop()
        for i in np.flatnonzero(mask[:, j] & ~seen):
            seen[i] = True
            stack.append(int(i))
    return bool(seen.all())
