import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvgnn.autodiff import Tape, backward, grad_check
from tvgnn.errors import EmptyAssignment, EmptyGraph, EmptyVector, IsolatedVertex, LabelOutOfRange
from tvgnn.graph import Graph, make_rng
from tvgnn.losses import (
    TvLossConfig, an_loss_raw, beta, cross_entropy_loss, dmon_loss, gtv_loss_raw,
    mincut_loss, quant_rho, tvgnn_loss,
)

from conftest import random_connected_graph, random_simplex

EDGE = Graph.from_edges(2, [(0, 1)], np.zeros((2, 1)))


def scalar(fn, *args):
    t = Tape()
    s = t.constant(args[1])
    node = fn(args[0], s, *args[2:], t) if fn is not an_loss_raw else fn(s, *args[2:], t)
    return float(t.value(node if not isinstance(node, tuple) else node[0])), node, t


def run_loss(fn, g, s, *extra, **kw):
    t = Tape()
    node, report = fn(g, t.constant(s), *extra, tape=t, **kw)
    return float(t.value(node)), report


def test_quant_rho_examples():
    assert quant_rho([0.9, 0.5, 0.1, 0.3], 1) == (0.3, 3)
    assert quant_rho([0.4] * 5, 2)[0] == 0.4
    assert quant_rho([0.7], 3) == (0.7, 0)
    assert quant_rho([0.2, 0.5, 0.5, 0.5], 1) == (0.5, 3)
    with pytest.raises(EmptyVector):
        quant_rho([], 1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=1, max_size=12),
       st.floats(0, 5))
def test_quant_rho_matches_sort_oracle(values, rho):
    q = math.floor(len(values) / (rho + 1))
    q = min(q, len(values) - 1)
    ranked = sorted(range(len(values)), key=lambda i: (-values[i], i))
    assert quant_rho(values, rho) == (values[ranked[q]], ranked[q])


def _gtv_raw(g, s):
    t = Tape()
    return float(t.value(gtv_loss_raw(g, t.constant(s), t)))


def _an_raw(s, rho, quantile_grad=True):
    t = Tape()
    return float(t.value(an_loss_raw(t.constant(s), rho, t, quantile_grad)))


def test_gtv_raw_examples():
    assert _gtv_raw(EDGE, np.eye(2)) == 2
    assert _gtv_raw(EDGE, np.full((2, 2), 0.5)) == 0
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.zeros((4, 1)))
    assert _gtv_raw(g, np.tile([0.2, 0.8], (4, 1))) == 0


def dense_gtv_oracle(a, s):
    total = 0.0
    n = a.shape[0]
    for i in range(n):
        for j in range(i, n):
            for k in range(s.shape[1]):
                total += a[i, j] * abs(s[i, k] - s[j, k])
    return total


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(1, 5), st.integers(0, 10_000))
def test_gtv_raw_matches_dense_oracle(n, k, seed):
    r = make_rng(seed)
    g = random_connected_graph(r, n, weighted=True)
    # dyadic values keep every sum exact in floating point
    s = r.integers(0, 9, size=(n, k)) / 8.0
    assert _gtv_raw(g, s) == dense_gtv_oracle(g.adjacency.toarray(), s)


def test_gtv_raw_label_invariance(rng):
    g = random_connected_graph(rng, 9, weighted=True)
    s = random_simplex(rng, 9, 4)
    perm = rng.permutation(4)
    assert _gtv_raw(g, s) == pytest.approx(_gtv_raw(g, s[:, perm]), abs=1e-12)


def test_an_raw_examples():
    hard = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    assert _an_raw(hard, 1) == 4
    collapsed = np.tile([1.0, 0.0], (4, 1))
    assert _an_raw(collapsed, 1) == 0
    assert _an_raw(np.full((5, 3), 1 / 3), 2) == 0
    with pytest.raises(EmptyAssignment):
        _an_raw(np.zeros((0, 2)), 1)


def test_an_raw_quantile_flag_same_value(rng):
    s = random_simplex(rng, 7, 3)
    assert _an_raw(s, 2, True) == pytest.approx(_an_raw(s, 2, False), abs=1e-15)


def test_beta_examples():
    assert beta(4, 2, 1) == 4
    assert beta(6, 3, 1) == 6
    assert beta(10, 2, 3) == 15


def test_tvgnn_edge_example():
    total, rep = run_loss(tvgnn_loss, EDGE, np.eye(2), TvLossConfig(1, 1, rho=1))
    assert total == 1 and rep.components["gtv"] == 1 and rep.components["an"] == 0


def test_tvgnn_degenerate(rng):
    g = random_connected_graph(rng, 12)
    _, rep = run_loss(tvgnn_loss, g, np.tile([0, 1.0, 0], (12, 1)), TvLossConfig())
    assert rep.components["an"] == pytest.approx(1, abs=1e-12)
    _, rep = run_loss(tvgnn_loss, g, np.full((12, 3), 1 / 3), TvLossConfig())
    assert rep.components["gtv"] == 0
    assert rep.components["an"] == pytest.approx(1, abs=1e-12)


def test_tvgnn_empty_graph():
    g = Graph.from_edges(3, [], np.zeros((3, 1)))
    with pytest.raises(EmptyGraph):
        run_loss(tvgnn_loss, g, np.full((3, 2), 0.5), TvLossConfig())


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 15), st.integers(2, 5), st.integers(0, 10_000),
       st.floats(0, 2), st.floats(0, 2))
def test_report_total_matches_components(n, k, seed, a1, a2):
    r = make_rng(seed)
    g = random_connected_graph(r, n)
    total, rep = run_loss(tvgnn_loss, g, random_simplex(r, n, k), TvLossConfig(a1, a2))
    c = rep.components
    assert abs(total - (a1 * c["gtv"] + a2 * c["an"])) <= 1e-10
    assert 0 <= c["gtv"] <= 1 and 0 <= c["an"] <= 1


def test_tv_config_validation():
    with pytest.raises(ValueError):
        TvLossConfig(rho=0.5)
    with pytest.raises(ValueError):
        TvLossConfig(alpha1=-1)
    assert TvLossConfig().rho_for(4) == 3


def dense_mincut_oracle(a, s):
    d = a.sum(axis=1)
    at = a / np.sqrt(np.outer(d, d))
    dt = np.diag(at.sum(axis=1))
    cut = -np.trace(s.T @ at @ s) / np.trace(s.T @ dt @ s)
    sts = s.T @ s
    k = s.shape[1]
    return cut + np.linalg.norm(sts / np.linalg.norm(sts) - np.eye(k) / np.sqrt(k))


def test_mincut_examples():
    total, rep = run_loss(mincut_loss, EDGE, np.eye(2))
    assert total == 0 and rep.components["mincut_ortho"] == pytest.approx(0, abs=1e-15)
    two = Graph.from_edges(4, [(0, 1), (2, 3)], np.zeros((4, 1)))
    _, rep = run_loss(mincut_loss, two, np.array([[1, 0], [1, 0], [0, 1], [0, 1.0]]))
    assert rep.components["mincut_cut"] == -1
    total, _ = run_loss(mincut_loss, EDGE, np.full((2, 2), 0.5))
    assert total == pytest.approx(dense_mincut_oracle(np.array([[0, 1.0], [1, 0]]),
                                                      np.full((2, 2), 0.5)), abs=1e-12)
    assert total == pytest.approx(-0.2346, abs=1e-4)
    iso = Graph.from_edges(3, [(0, 1)], np.zeros((3, 1)))
    with pytest.raises(IsolatedVertex):
        run_loss(mincut_loss, iso, np.full((3, 2), 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(2, 4), st.integers(0, 10_000))
def test_mincut_matches_oracle(n, k, seed):
    r = make_rng(seed)
    g = random_connected_graph(r, n, weighted=True)
    s = random_simplex(r, n, k)
    total, rep = run_loss(mincut_loss, g, s)
    assert total == pytest.approx(dense_mincut_oracle(g.adjacency.toarray(), s), abs=1e-12)
    assert -1 - 1e-12 <= rep.components["mincut_cut"] <= 1e-12


def dense_dmon_oracle(a, s, normalized=False):
    d = a.sum(axis=1)[None, :]
    two_e = a.sum()
    deg = s.T @ d.T @ d @ s
    if normalized:
        deg = deg / two_e
    mod = -np.trace(s.T @ a @ s - deg) / two_e
    n, k = s.shape
    reg = np.sqrt(k) / n * np.linalg.norm(s.sum(axis=0)) - 1
    return mod, reg


def test_dmon_examples():
    path = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.zeros((4, 1)))
    _, rep = run_loss(dmon_loss, path, np.full((4, 2), 0.5))
    assert rep.components["dmon_reg"] == pytest.approx(0, abs=1e-15)
    _, rep = run_loss(dmon_loss, path, np.tile([1.0, 0.0], (4, 1)))
    assert rep.components["dmon_reg"] == pytest.approx(math.sqrt(2) - 1, abs=1e-15)
    total, rep = run_loss(dmon_loss, EDGE, np.eye(2))
    mod, reg = dense_dmon_oracle(np.array([[0, 1.0], [1, 0]]), np.eye(2))
    assert rep.components["dmon_mod"] == pytest.approx(mod, abs=1e-15)
    assert total == pytest.approx(mod + reg, abs=1e-15)
    with pytest.raises(EmptyGraph):
        run_loss(dmon_loss, Graph.from_edges(2, [], np.zeros((2, 1))), np.eye(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(2, 4), st.integers(0, 10_000), st.booleans())
def test_dmon_matches_oracle(n, k, seed, normalized):
    r = make_rng(seed)
    g = random_connected_graph(r, n, weighted=True)
    s = random_simplex(r, n, k)
    total, rep = run_loss(dmon_loss, g, s, normalized=normalized, reg_weight=0.1)
    mod, reg = dense_dmon_oracle(g.adjacency.toarray(), s, normalized)
    assert rep.components["dmon_mod"] == pytest.approx(mod, abs=1e-12)
    assert total == pytest.approx(mod + 0.1 * reg, abs=1e-12)


def _xent(logits, label):
    t = Tape()
    return float(t.value(cross_entropy_loss(t.constant([logits]), label, t)))


def test_cross_entropy_examples():
    assert _xent([0.0, 0.0], 0) == pytest.approx(math.log(2), abs=1e-15)
    assert _xent([100.0, 0.0], 0) == pytest.approx(0, abs=1e-40)
    z = np.array([1.0, 2.0, 3.0])
    assert _xent(z, 2) == pytest.approx(-np.log(np.exp(3) / np.exp(z).sum()), abs=1e-14)
    assert _xent(z, 2) == pytest.approx(0.40761, abs=1e-5)
    with pytest.raises(LabelOutOfRange):
        _xent([0.0, 0.0], 2)


def test_quantile_gradient_routing(rng):
    g = random_connected_graph(rng, 8)
    z = rng.normal(size=(8, 3)) * 2

    def f(t, ids):
        return tvgnn_loss(g, t.softmax(ids["z"]), TvLossConfig(0.5, 1.0), t)[0]
    assert grad_check(f, {"z": z}) <= 1e-4

    # with the quantile held constant the selected entry loses its gradient share
    def const(t, ids):
        return tvgnn_loss(g, t.softmax(ids["z"]), TvLossConfig(0.5, 1.0, quantile_grad=False), t)[0]
    t1, t2 = Tape(), Tape()
    g1 = backward(t1, f(t1, {"z": t1.param("z", z)}))["z"]
    g2 = backward(t2, const(t2, {"z": t2.param("z", z)}))["z"]
    assert not np.allclose(g1, g2)
