"""Peer-to-peer communication graphs and mixing weights."""
from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import TopologyError

__all__ = ["Topology", "metropolis_weights"]


def metropolis_weights(K, neighbors):
    """Metropolis-Hastings weights ``1 / (1 + max(deg_k, deg_j))`` on edges.

    Symmetric and doubly stochastic for any undirected graph.
    """
    deg = [len(nb) for nb in neighbors]
    W = np.zeros((K, K))
    for k in range(K):
        for j in neighbors[k]:
            W[k, j] = 1.0 / (1.0 + max(deg[k], deg[j]))
        W[k, k] = 1.0 - W[k].sum()
    return W


class Topology:
    """Undirected graph on K sites with mixing weights ``w_kj`` (``w_kk`` included).

    Rows of ``weights`` sum to 1, off-diagonal support equals the edge set,
    and the graph must be connected.
    """

    def __init__(self, K, edges, weights=None, name="custom"):
        if K < 1:
            raise TopologyError("K must be at least 1")
        nb = [set() for _ in range(K)]
        for a, b in edges:
            if not (0 <= a < K and 0 <= b < K):
                raise TopologyError(f"edge ({a}, {b}) outside 0..{K - 1}")
            if a == b:
                continue
            nb[a].add(b)
            nb[b].add(a)
        self.K = K
        self.name = name
        self.neighbors = tuple(frozenset(s) for s in nb)
        W = metropolis_weights(K, self.neighbors) if weights is None else np.array(weights, dtype=float)
        self._validate(W)
        W.setflags(write=False)
        self.weights = W
        self._check_connected()

    def _validate(self, W):
        K = self.K
        if W.shape != (K, K):
            raise TopologyError(f"weights must be {K}x{K}")
        if np.any(W < 0):
            raise TopologyError("mixing weights must be nonnegative")
        if not np.allclose(W.sum(axis=1), 1.0, atol=1e-12):
            raise TopologyError("mixing weight rows must sum to 1")
        for k in range(K):
            for j in range(K):
                if j != k and W[k, j] > 0 and j not in self.neighbors[k]:
                    raise TopologyError(f"weight w[{k},{j}] > 0 but {k} and {j} are not neighbours")

    def _check_connected(self):
        seen = {0}
        queue = deque([0])
        while queue:
            k = queue.popleft()
            for j in self.neighbors[k]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        if len(seen) != self.K:
            raise TopologyError(f"topology is disconnected: {self.K - len(seen)} site(s) unreachable from site 0")

    @property
    def doubly_stochastic(self):
        return bool(np.allclose(self.weights.sum(axis=0), 1.0, atol=1e-12))

    @property
    def spectral_gap(self):
        ev = np.sort(np.abs(np.linalg.eigvals(self.weights)))[::-1]
        return float(1.0 - ev[1]) if self.K > 1 else 1.0

    @classmethod
    def ring(cls, K):
        return cls(K, [(k, (k + 1) % K) for k in range(K)], name="ring")

    @classmethod
    def complete(cls, K):
        edges = [(a, b) for a in range(K) for b in range(a + 1, K)]
        return cls(K, edges, np.full((K, K), 1.0 / K), name="complete")

    @classmethod
    def star(cls, K):
        return cls(K, [(0, k) for k in range(1, K)], name="star")

    @classmethod
    def from_name(cls, name, K):
        try:
            return {"ring": cls.ring, "complete": cls.complete, "star": cls.star}[name](K)
        except KeyError:
            raise TopologyError(f"unknown topology {name!r}") from None

    def __repr__(self):
        return f"Topology({self.name!r}, K={self.K})"
