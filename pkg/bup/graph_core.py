"""
Sparse graph structure and the symmetric-normalized GCN propagation kernel.

Self-loops are never stored as edges. They enter only through ``degree_hat``
(|N(i)| + 1) and the diagonal entries of the kernel, so inputs that already
contain self pairs cannot be double counted.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from bup.errors import InputError

_LOG = logging.getLogger("GraphCore")

Edge = Tuple[int, int]


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph over dense 0-based node indices."""

    num_nodes: int
    edges: Tuple[Edge, ...]
    neighbor_lists: Tuple[Tuple[int, ...], ...]
    degree_hat: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        """Plain degrees |N(i)| without the self-loop."""
        return self.degree_hat - 1.0


@dataclass(frozen=True, eq=False)
class PropagationKernel:
    """K = D^-1/2 (A + I) D^-1/2 in CSR form with sorted column indices."""

    matrix: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return int(self.matrix.shape[0])

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_graph(edge_list: Iterable[Sequence[int]], num_nodes: int) -> Graph:
    if not isinstance(num_nodes, (int, np.integer)) or num_nodes <= 0:
        raise InputError(f"num_nodes must be a positive integer, got {num_nodes!r}")
    num_nodes = int(num_nodes)

    unique: set[Edge] = set()
    raw_count = 0
    self_pairs = 0
    for pair in edge_list:
        raw_count += 1
        if len(pair) != 2:
            raise InputError(f"edge {tuple(pair)!r} is not a node pair")
        i, j = int(pair[0]), int(pair[1])
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise InputError(f"edge ({i}, {j}) references a node outside [0, {num_nodes})")
        if i == j:
            self_pairs += 1
            continue
        unique.add((i, j) if i < j else (j, i))

    merged = raw_count - self_pairs - len(unique)
    if merged or self_pairs:
        _LOG.debug(
            "Merged %s duplicate/reversed edges and dropped %s self pairs (%s unique edges).",
            merged,
            self_pairs,
            len(unique),
        )

    neighbors: list[list[int]] = [[] for _ in range(num_nodes)]
    for i, j in unique:
        neighbors[i].append(j)
        neighbors[j].append(i)
    neighbor_lists = tuple(tuple(sorted(items)) for items in neighbors)
    degree_hat = np.array([len(items) + 1 for items in neighbor_lists], dtype=np.float64)

    return Graph(
        num_nodes=num_nodes,
        edges=tuple(sorted(unique)),
        neighbor_lists=neighbor_lists,
        degree_hat=_frozen(degree_hat),
    )


def adjacency_matrix(g: Graph) -> sp.csr_matrix:
    """Symmetric 0/1 adjacency A without self-loops."""
    if not g.edges:
        return sp.csr_matrix((g.num_nodes, g.num_nodes), dtype=np.float64)
    pairs = np.asarray(g.edges, dtype=np.int64)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    data = np.ones(rows.shape[0], dtype=np.float64)
    matrix = sp.csr_matrix((data, (rows, cols)), shape=(g.num_nodes, g.num_nodes))
    matrix.sort_indices()
    return matrix


def build_kernel(g: Graph) -> PropagationKernel:
    a_hat = (adjacency_matrix(g) + sp.identity(g.num_nodes, format="csr", dtype=np.float64)).tocoo()
    d = g.degree_hat
    # d[i] * d[j] commutes, so k_ij and k_ji are bit-identical.
    values = 1.0 / np.sqrt(d[a_hat.row] * d[a_hat.col])
    matrix = sp.csr_matrix((values, (a_hat.row, a_hat.col)), shape=(g.num_nodes, g.num_nodes))
    matrix.sort_indices()
    return PropagationKernel(matrix=matrix)


def propagate(kernel: PropagationKernel, node_matrix: np.ndarray) -> np.ndarray:
    """Row i of the result is sum_j k_ij * row_j over N(i) and i itself."""
    values = np.asarray(node_matrix, dtype=np.float64)
    if values.ndim not in (1, 2):
        raise InputError(f"node_matrix must be 1-D or 2-D, got {values.ndim}-D")
    if values.shape[0] != kernel.num_nodes:
        raise InputError(
            f"node_matrix has {values.shape[0]} rows but the kernel covers {kernel.num_nodes} nodes"
        )
    return np.asarray(kernel.matrix @ values)


def shortest_path_lengths(g: Graph, sources: Sequence[int]) -> np.ndarray:
    """Unweighted BFS distances, shape (len(sources), num_nodes); inf when unreachable."""
    indices = np.asarray(sources, dtype=np.int64)
    if indices.size == 0:
        return np.empty((0, g.num_nodes), dtype=np.float64)
    if indices.min() < 0 or indices.max() >= g.num_nodes:
        raise InputError("source node outside the graph")
    return csgraph.shortest_path(adjacency_matrix(g), directed=False, unweighted=True, indices=indices)


def subgraph_degrees(g: Graph, nodes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Plain degrees for ``nodes`` (all nodes when omitted)."""
    degrees = g.degrees()
    if nodes is None:
        return degrees.copy()
    return degrees[np.asarray(nodes, dtype=np.int64)]
