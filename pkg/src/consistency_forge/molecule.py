"""Molecular graph: atom types plus a bond list. Conditions every model
and the synthetic oracle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class MoleculeGraph:
    atom_types: np.ndarray  # (A,) small-integer element ids
    bonds: tuple[tuple[int, int, int], ...] = field(default_factory=tuple)  # (i, j, order), i < j

    def __post_init__(self):
        types = np.asarray(self.atom_types, dtype=np.int64)
        if types.ndim != 1 or types.shape[0] < 2:
            raise DataError("atom_types must be a 1-D array with at least 2 entries")
        if (types < 0).any():
            raise DataError("atom type ids must be non-negative")
        bonds = tuple((int(i), int(j), int(o)) for i, j, o in self.bonds)
        a = types.shape[0]
        seen = set()
        for i, j, o in bonds:
            if not (0 <= i < j < a):
                raise DataError(f"bond ({i}, {j}) out of range or not i < j")
            if (i, j) in seen:
                raise DataError(f"duplicate bond ({i}, {j})")
            if o < 1:
                raise DataError(f"bond order must be >= 1, got {o}")
            seen.add((i, j))
        object.__setattr__(self, "atom_types", types)
        object.__setattr__(self, "bonds", bonds)

    @property
    def atom_count(self) -> int:
        return int(self.atom_types.shape[0])

    def adjacency(self) -> list[list[int]]:
        adj = [[] for _ in range(self.atom_count)]
        for i, j, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def is_connected(self) -> bool:
        if self.atom_count == 0:
            return False
        adj = self.adjacency()
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.atom_count

    def bond_order_matrix(self) -> np.ndarray:
        """(A, A) integer matrix of bond orders, 0 where unbonded."""
        m = np.zeros((self.atom_count, self.atom_count), dtype=np.int64)
        for i, j, o in self.bonds:
            m[i, j] = o
            m[j, i] = o
        return m

    def graph_distances(self) -> np.ndarray:
        """All-pairs shortest-path hop counts (-1 if disconnected)."""
        a = self.atom_count
        adj = self.adjacency()
        dist = np.full((a, a), -1, dtype=np.int64)
        for src in range(a):
            dist[src, src] = 0
            queue = [src]
            while queue:
                nxt = []
                for u in queue:
                    for v in adj[u]:
                        if dist[src, v] < 0:
                            dist[src, v] = dist[src, u] + 1
                            nxt.append(v)
                queue = nxt
        return dist
