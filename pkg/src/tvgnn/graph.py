"""Graph container, normalizations and synthetic generators.

Adjacency matrices are stored as ``scipy.sparse.csr_matrix`` with both
directions of every undirected edge present, so the undirected edge count is
``nnz // 2``.

All sampling goes through :func:`make_rng`, a Philox counter-based generator
(64-bit counters, numpy's ``np.random.Philox``) seeded with a single integer.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvalidProbability, InvalidSize, IsolatedVertex

# SBM feature corruption: probability of flipping each one-hot coordinate and
# the number of appended U[0, 1) noise columns.
SBM_FLIP_PROB = 0.1
SBM_NOISE_COLUMNS = 4


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based PRNG used for every random draw in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph.

    Parameters
    ----------
    adjacency : scipy.sparse matrix, shape (N, N)
        Symmetric, nonnegative, without self loops. Converted to canonical
        CSR (sorted column indices, no explicit zeros).
    features : ndarray, shape (N, F)
    vertex_labels : ndarray of int, optional
    graph_label : int, optional
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    vertex_labels: np.ndarray | None = None
    graph_label: int | None = None

    def __post_init__(self):
        a = sp.csr_matrix(self.adjacency, dtype=np.float64, copy=True)
        a.sum_duplicates()
        a.eliminate_zeros()
        a.sort_indices()
        if a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"adjacency must be square, got {a.shape}")
        if np.any(a.data < 0):
            raise ValueError("edge weights must be nonnegative")
        if a.diagonal().any():
            raise ValueError("adjacency has self loops")
        if (a != a.T).nnz:
            raise ValueError("adjacency is not symmetric")
        self.adjacency = a

        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != a.shape[0]:
            raise DimensionMismatch(
                f"features have shape {x.shape}, expected ({a.shape[0]}, F)"
            )
        self.features = x
        if self.vertex_labels is not None:
            y = np.asarray(self.vertex_labels, dtype=np.int64)
            if y.shape != (a.shape[0],):
                raise DimensionMismatch(
                    f"{y.shape[0]} vertex labels for {a.shape[0]} vertices"
                )
            self.vertex_labels = y
        if self.graph_label is not None:
            self.graph_label = int(self.graph_label)

    @classmethod
    def from_edges(cls, n, edges, features, weights=None, **kwargs):
        """Build a graph from an edge list, symmetrizing by union.

        Duplicate edges (in either direction) keep the largest weight.
        Self loops are dropped.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if weights is None:
            weights = np.ones(len(edges))
        weights = np.asarray(weights, dtype=np.float64)
        keep = edges[:, 0] != edges[:, 1]
        edges, weights = edges[keep], weights[keep]
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        vals = np.concatenate([weights, weights])
        if len(rows):
            # max-reduce duplicates: sort by (row, col, value) and keep the last
            order = np.lexsort((vals, cols, rows))
            rows, cols, vals = rows[order], cols[order], vals[order]
            last = np.ones(len(rows), dtype=bool)
            last[:-1] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            rows, cols, vals = rows[last], cols[last], vals[last]
        a = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return cls(a, features, **kwargs)

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return self.adjacency.nnz // 2

    @property
    def total_weight(self) -> float:
        """Sum of undirected edge weights; equals ``n_edges`` for unit weights."""
        return float(self.adjacency.data.sum()) / 2.0

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    def edge_list(self):
        """Upper-triangle edges ``(i, j, a_ij)`` with ``i < j``, row-major."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Weighted incidence matrix B (E x N) with rows a_ij (e_i - e_j), i < j."""
        i, j, w = self.edge_list()
        e = len(i)
        rows = np.concatenate([np.arange(e), np.arange(e)])
        cols = np.concatenate([i, j])
        vals = np.concatenate([w, -w])
        return sp.csr_matrix((vals, (rows, cols)), shape=(e, self.n_vertices))

    def laplacian(self) -> sp.csr_matrix:
        """Combinatorial Laplacian L = D - A."""
        return (sp.diags(self.degrees) - self.adjacency).tocsr()

    def with_features(self, features) -> "Graph":
        return Graph(self.adjacency, features, self.vertex_labels, self.graph_label)


def sym_norm_adjacency(g: Graph, allow_isolated: bool = False) -> sp.csr_matrix:
    """Symmetric normalization D^{-1/2} A D^{-1/2}.

    Raises IsolatedVertex for zero-degree vertices unless ``allow_isolated``,
    in which case their rows and columns stay empty.
    """
    return _sym_norm(g.adjacency, allow_isolated)


def _sym_norm(a: sp.csr_matrix, allow_isolated: bool = False) -> sp.csr_matrix:
    a = sp.csr_matrix(a, dtype=np.float64)
    a.sort_indices()
    d = np.asarray(a.sum(axis=1)).ravel()
    zero = np.flatnonzero(d <= 0)
    if len(zero) and not allow_isolated:
        raise IsolatedVertex(int(zero[0]))
    rows = np.repeat(np.arange(a.shape[0]), np.diff(a.indptr))
    # a_ij / sqrt(d_i d_j) in one rounding step; entries only exist where d > 0
    data = a.data / np.sqrt(d[rows] * d[a.indices])
    return sp.csr_matrix((data, a.indices.copy(), a.indptr.copy()), shape=a.shape)


def gen_ring(n: int) -> Graph:
    """Cycle on ``n`` vertices with 2-D positions on the unit circle."""
    if n < 3:
        raise InvalidSize(f"ring needs n >= 3, got {n}")
    idx = np.arange(n)
    edges = np.stack([idx, (idx + 1) % n], axis=1)
    theta = 2 * np.pi * idx / n
    feats = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return Graph.from_edges(n, edges, feats)


def gen_grid(rows: int, cols: int) -> Graph:
    """4-neighbour lattice; vertex ``r * cols + c`` has features ``(r, c)``."""
    if rows < 2 or cols < 2:
        raise InvalidSize(f"grid needs rows, cols >= 2, got {rows}x{cols}")
    ids = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    vert = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    r, c = np.divmod(np.arange(rows * cols), cols)
    feats = np.stack([r, c], axis=1).astype(np.float64)
    return Graph.from_edges(rows * cols, np.concatenate([horiz, vert]), feats)


def gen_sbm(sizes, p_in: float, p_out: float, seed: int = 0) -> Graph:
    """Stochastic block model with noisy one-hot block features.

    Features are the block one-hot with every coordinate flipped with
    probability ``SBM_FLIP_PROB``, followed by ``SBM_NOISE_COLUMNS`` columns of
    U[0, 1) noise. ``vertex_labels`` holds the block ids.
    """
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise InvalidProbability(f"probability {p} outside [0, 1]")
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise InvalidSize(f"block sizes must be >= 1, got {sizes}")
    rng = make_rng(seed)
    n = sum(sizes)
    blocks = np.repeat(np.arange(len(sizes)), sizes)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(blocks[iu] == blocks[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    onehot = np.eye(len(sizes))[blocks]
    flips = rng.random(onehot.shape) < SBM_FLIP_PROB
    onehot = np.where(flips, 1.0 - onehot, onehot)
    noise = rng.random((n, SBM_NOISE_COLUMNS))
    feats = np.concatenate([onehot, noise], axis=1)
    return Graph.from_edges(n, edges, feats, vertex_labels=blocks)


def connected_components(g: Graph) -> np.ndarray:
    from scipy.sparse.csgraph import connected_components as cc

    _, labels = cc(g.adjacency, directed=False)
    return labels


def is_connected(g: Graph) -> bool:
    return g.n_vertices > 0 and connected_components(g).max() == 0


def cycle_order(g: Graph) -> np.ndarray | None:
    """Vertex order along the cycle if ``g`` is a single cycle, else None."""
    if g.n_vertices < 3 or not np.all(np.diff(g.adjacency.indptr) == 2):
        return None
    if not is_connected(g):
        return None
    a = g.adjacency
    order = [0]
    prev, cur = -1, 0
    for _ in range(g.n_vertices - 1):
        nbrs = a.indices[a.indptr[cur]:a.indptr[cur + 1]]
        nxt = nbrs[0] if nbrs[0] != prev else nbrs[1]
        order.append(int(nxt))
        prev, cur = cur, int(nxt)
    return np.asarray(order)
