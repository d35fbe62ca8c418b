"""Distance-based bond inference shared by canonicalization and the metrics."""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .molio import ElementTable, Molecule, element_table


@dataclass(frozen=True, eq=False)
class BondGraph:
    """Symmetric bond-order matrix; entry 0 means no bond."""

    orders: np.ndarray

    def __post_init__(self):
        orders = np.array(self.orders, dtype=np.int64)
        if orders.ndim != 2 or orders.shape[0] != orders.shape[1]:
            raise ValueError("bond-order matrix must be square")
        if not np.array_equal(orders, orders.T):
            raise ValueError("bond-order matrix must be symmetric")
        if np.any(np.diag(orders) != 0):
            raise ValueError("self bonds are not allowed")
        if np.any((orders < 0) | (orders > 3)):
            raise ValueError("bond orders must lie in {0, 1, 2, 3}")
        orders.setflags(write=False)
        object.__setattr__(self, "orders", orders)

    @property
    def n(self) -> int:
        return self.orders.shape[0]

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.orders[i])]

    def degree(self, i: int) -> int:
        return int(np.count_nonzero(self.orders[i]))

    def valence(self, i: int) -> int:
        return int(self.orders[i].sum())

    def edges(self) -> list[tuple[int, int, int]]:
        iu, ju = np.nonzero(np.triu(self.orders))
        return [(int(i), int(j), int(self.orders[i, j])) for i, j in zip(iu, ju)]

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        for i, j, k in self.edges():
            g.add_edge(i, j, order=k)
        return g

    def is_connected(self) -> bool:
        return self.n > 0 and nx.is_connected(self.to_networkx())


def infer_bonds(mol: Molecule, table: ElementTable | None = None) -> BondGraph:
    """Bond order per pair: the highest order whose distance cutoff exceeds the pair distance."""
    table = table or element_table()
    n = len(mol)
    dist = np.linalg.norm(mol.coords[:, None, :] - mol.coords[None, :, :], axis=-1)
    orders = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            thr = table.pair_thresholds(mol.atom_types[i], mol.atom_types[j])
            for k in (3, 2, 1):
                if thr[k - 1] is not None and dist[i, j] < thr[k - 1]:
                    orders[i, j] = orders[j, i] = k
                    break
    return BondGraph(orders)
