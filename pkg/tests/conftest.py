import numpy as np
import pytest

from tvgnn.graph import Graph, make_rng


def random_connected_graph(rng, n, extra_prob=0.2, weighted=False, n_features=2):
    """Random spanning tree plus Bernoulli chords."""
    edges = []
    perm = rng.permutation(n)
    for idx in range(1, n):
        edges.append((int(perm[idx]), int(perm[rng.integers(idx)])))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra_prob:
                edges.append((i, j))
    w = rng.integers(1, 4, size=len(edges)).astype(float) if weighted else None
    return Graph.from_edges(n, edges, rng.normal(size=(n, n_features)), w)


def random_simplex(rng, n, k):
    z = rng.normal(size=(n, k)) * rng.uniform(0.1, 5.0)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return make_rng(12345)
