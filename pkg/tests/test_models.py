import math

import numpy as np
import pytest
import scipy.sparse as sp

from tvgnn.autodiff import Tape, grad_check
from tvgnn.datasets import GraphCollection
from tvgnn.errors import ClassTooSmall, DimensionMismatch, NoisyConfig, NonFiniteLoss
from tvgnn.graph import Graph, gen_ring, gen_sbm, make_rng, sym_norm_adjacency
from tvgnn.layers import MlpParams
from tvgnn.metrics import argmax_partition, nmi
from tvgnn.models import (
    ModelConfig, TrainConfig, build_classifier, build_cluster_model, classify_forward,
    cluster_forward, cluster_preset, load_checkpoint, load_params_into, mutag_preset, pool,
    pooled_graph, save_checkpoint, stratified_kfold, train_classifier, train_cluster,
)
from tvgnn.optim import AdamState, adam_step

from conftest import random_connected_graph

SMALL = ModelConfig(mp_layers=1, mp_channels=8, mlp_layers=1, mlp_channels=8)


def _s(model, g):
    t = Tape()
    return t.value(cluster_forward(model, g, t))


def test_cluster_forward_zero_mlp_is_uniform(rng):
    g = random_connected_graph(rng, 10)
    model = build_cluster_model(2, 4, SMALL, seed=0)
    for w, b in zip(model.assign_mlp.weights, model.assign_mlp.biases):
        w[...] = 0
        b[...] = 0
    np.testing.assert_allclose(_s(model, g), 0.25)


def test_cluster_forward_k1_and_determinism(rng):
    g = random_connected_graph(rng, 10)
    np.testing.assert_array_equal(_s(build_cluster_model(2, 1, SMALL, seed=3), g), 1.0)
    a = _s(build_cluster_model(2, 3, SMALL, seed=3), g)
    b = _s(build_cluster_model(2, 3, SMALL, seed=3), g)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        _s(build_cluster_model(5, 3, SMALL, seed=3), g)


def test_models_chain_widths():
    model = build_cluster_model(6, 5, ModelConfig(), seed=0)
    assert [l.weight.shape for l in model.mp_layers] == [(6, 512), (512, 512)]
    assert [w.shape for w in model.assign_mlp.weights] == [(512, 256), (256, 5)]


def test_train_cluster_sbm():
    g = gen_sbm([20, 20], 0.9, 0.02, seed=0)
    _, s, hist = train_cluster(g, 2, cluster_preset(epochs=500, seed=0))
    assert nmi(g.vertex_labels, argmax_partition(s)) >= 0.95
    assert len(hist) == 500
    assert set(hist[0]) == {"epoch", "total", "gtv", "an"}
    assert s.min() >= 0 and abs(s.sum(axis=1) - 1).max() <= 1e-9


def test_train_cluster_zero_coefficients_only_decay():
    g = gen_ring(12)
    cfg = TrainConfig(epochs=5, alpha1=0.0, alpha2=0.0, l2=0.0, model=SMALL)
    model, _, hist = train_cluster(g, 3, cfg)
    fresh = build_cluster_model(2, 3, SMALL, cfg.seed)
    assert all(h["total"] == 0 for h in hist)
    for k, v in fresh.parameters().items():
        np.testing.assert_array_equal(model.parameters()[k], v)
    cfg.l2 = 1e-2
    model, _, _ = train_cluster(g, 3, cfg)
    w0 = fresh.parameters()["mp.0.weight"]
    w1 = model.parameters()["mp.0.weight"]
    assert np.all(np.abs(w1) <= np.abs(w0) + 1e-15) and not np.array_equal(w0, w1)
    np.testing.assert_array_equal(model.parameters()["assign.0.bias"], 0)


def test_train_cluster_rejects_degenerate_k():
    g = gen_ring(5)
    with pytest.raises(NoisyConfig):
        train_cluster(g, 5, TrainConfig(epochs=1, model=SMALL))
    with pytest.raises(NoisyConfig):
        train_cluster(g, 1, TrainConfig(epochs=1, model=SMALL))


def test_train_cluster_non_finite_aborts():
    g = gen_ring(6)
    g.features[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        train_cluster(g, 2, TrainConfig(epochs=3, model=SMALL))
    assert info.value.epoch == 1


def test_train_cluster_baselines_run():
    g = gen_sbm([8, 8], 0.9, 0.05, seed=1)
    for loss in ("mincut", "dmon"):
        cfg = TrainConfig(epochs=20, loss=loss, model=ModelConfig(conv="gcn", mp_layers=1,
                                                                  mp_channels=8, mlp_channels=8))
        _, s, hist = train_cluster(g, 2, cfg)
        assert s.shape == (16, 2) and len(hist) == 20


def test_alpha2_zero_collapses():
    g = gen_sbm([20, 20], 0.8, 0.05, seed=7)
    _, _, hist = train_cluster(g, 2, cluster_preset(epochs=500, alpha2=0.0, seed=0))
    assert hist[-1]["an"] >= 0.9


def test_loss_moving_average_non_increasing():
    g = gen_sbm([20, 20], 0.8, 0.05, seed=7)
    _, _, hist = train_cluster(g, 2, cluster_preset(epochs=500, seed=1))
    total = np.array([h["total"] for h in hist])
    ma = np.convolve(total, np.ones(100) / 100, mode="valid")
    assert np.max(np.diff(ma)) <= 1e-3


def test_pool_identity(rng):
    g = random_connected_graph(rng, 7, weighted=True, n_features=3)
    a = sym_norm_adjacency(g)
    t = Tape()
    a_pool, x_pool = pool(a, t.constant(g.features), t.constant(np.eye(7)), t)
    np.testing.assert_array_equal(a_pool, a.toarray())
    np.testing.assert_array_equal(t.value(x_pool), g.features)


def test_pool_four_cycle_hard_split():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)], np.zeros((4, 1)))
    s = np.array([[1, 0], [1, 0], [0, 1], [0, 1.0]])
    t = Tape()
    a_pool, _ = pool(sym_norm_adjacency(g), t.constant(g.features), t.constant(s), t)
    np.testing.assert_array_equal(a_pool, [[1, 1], [1, 1]])
    np.testing.assert_array_equal(pooled_graph(a_pool, np.zeros((2, 1))).adjacency.toarray(),
                                  [[0, 1], [1, 0]])


def test_pool_uniform_and_mass(rng):
    g = random_connected_graph(rng, 9)
    a = sym_norm_adjacency(g)
    t = Tape()
    a_pool, _ = pool(a, t.constant(g.features), t.constant(np.full((9, 2), 0.5)), t)
    np.testing.assert_allclose(a_pool, a_pool[0, 0], rtol=1e-14)
    x = rng.integers(-5, 5, size=(9, 3)).astype(float)
    hard = np.eye(3)[rng.integers(0, 3, size=9)]
    _, xp = pool(a, t.constant(x), t.constant(hard), t)
    np.testing.assert_array_equal(t.value(xp).sum(axis=0), x.sum(axis=0))
    with pytest.raises(DimensionMismatch):
        pool(a, t.constant(x), t.constant(np.ones((4, 2))), t)


def test_pool_gradients(rng):
    g = random_connected_graph(rng, 6)
    a = sym_norm_adjacency(g)
    probe = rng.normal(size=(2, 3))

    def f(t, ids):
        _, xp = pool(a, ids["x"], t.softmax(ids["z"]), t)
        return t.sum(t.mul(xp, t.constant(probe)))
    assert grad_check(f, {"x": rng.normal(size=(6, 3)), "z": rng.normal(size=(6, 2))}) <= 1e-6


def _toy(n_graphs=40):
    graphs = []
    for i in range(n_graphs):
        n = 3 if i % 2 == 0 else 6
        edges = [(v, (v + 1) % n) for v in range(n)]
        graphs.append(Graph.from_edges(n, edges, np.ones((n, 1)), graph_label=i % 2))
    return GraphCollection(graphs, 2, [0, 1])


def test_classify_identity_pool_matches_plain_pipeline(rng):
    g = random_connected_graph(rng, 6, n_features=3)
    mcfg = ModelConfig(mp_layers=1, mp_channels=4, mlp_layers=1, mlp_channels=4,
                       post_mp_layers=0, delta=0.4)
    model = build_classifier(3, 2, 6, mcfg, seed=0)
    t = Tape()
    logits, assigns = classify_forward(model, g, t, force_s=[np.eye(6)])
    ref = Tape()
    x = ref.constant(g.features)
    from tvgnn.layers import gtvconv_forward, mlp_logits
    x = gtvconv_forward(g, x, model.blocks[0].mp[0], ref)
    x = ref.div_const(ref.sum(x, axis=0), 6)
    expect = ref.value(mlp_logits(x, model.head, ref))
    np.testing.assert_allclose(t.value(logits), expect, atol=1e-13)
    assert len(assigns) == 1 and assigns[0][0] is g


def test_classify_zero_head_uniform_and_deterministic(rng):
    g = random_connected_graph(rng, 8, n_features=3)
    mcfg = ModelConfig(mp_layers=1, mp_channels=4, mlp_channels=4)
    model = build_classifier(3, 3, 4, mcfg, seed=1)
    a = classify_forward(model, g, Tape())
    t1, t2 = Tape(), Tape()
    l1 = t1.value(classify_forward(model, g, t1)[0])
    l2 = t2.value(classify_forward(build_classifier(3, 3, 4, mcfg, seed=1), g, t2)[0])
    assert l1.tobytes() == l2.tobytes()
    model.head.weights[0][...] = 0
    t = Tape()
    logits = t.value(classify_forward(model, g, t)[0])
    e = np.exp(logits - logits.max())
    np.testing.assert_allclose(e / e.sum(), 1 / 3)


def test_train_classifier_toy():
    coll = _toy()
    folds = stratified_kfold(coll.labels, 5, seed=0)
    cfg = mutag_preset(seed=0)
    cfg.model.k_pool = 2
    _, met = train_classifier(coll, cfg, folds[0])
    assert met["test_accuracy"] == 1.0


def test_patience_zero_stops_at_first_non_improvement():
    coll = _toy()
    folds = stratified_kfold(coll.labels, 5, seed=0)
    cfg = mutag_preset(seed=0, patience=0, epochs=200)
    _, met = train_classifier(coll, cfg, folds[0])
    assert met["epochs"] == met["best_epoch"] + 1


def test_stratified_kfold():
    labels = np.array([0] * 5 + [1] * 5)
    folds = stratified_kfold(labels, 5, seed=0)
    for train, test in folds:
        assert sorted(labels[test].tolist()) == [0, 1]
        assert len(set(train) & set(test)) == 0
    tests = np.sort(np.concatenate([t for _, t in folds]))
    np.testing.assert_array_equal(tests, np.arange(10))
    for train, test in stratified_kfold([0, 0, 1, 1], 2, seed=4):
        assert sorted(np.array([0, 0, 1, 1])[test].tolist()) == [0, 1]
    a = stratified_kfold(labels, 5, seed=9)
    b = stratified_kfold(labels, 5, seed=9)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    with pytest.raises(ClassTooSmall):
        stratified_kfold([0] * 5 + [1] * 3, 4)


def test_stratified_kfold_proportions():
    labels = make_rng(3).integers(0, 3, size=101)
    counts = np.bincount(labels)
    for _, test in stratified_kfold(labels, 5, seed=1):
        per = np.bincount(labels[test], minlength=3)
        assert np.all(np.abs(per - counts / 5) <= 1)


def test_adam_first_step():
    theta = {"w": np.array([0.0])}
    adam_step(theta, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    # bias correction makes m_hat = v_hat = 1 at t = 1
    assert theta["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_and_determinism(rng):
    w = rng.normal(size=(3, 2))
    theta = {"w": w.copy()}
    state = AdamState()
    for _ in range(10):
        adam_step(theta, {"w": np.zeros((3, 2))}, state, lr=0.5)
    np.testing.assert_array_equal(theta["w"], w)

    def run():
        p, s = {"w": w.copy()}, AdamState()
        r = make_rng(0)
        for _ in range(20):
            adam_step(p, {"w": r.normal(size=(3, 2))}, s, lr=0.01, l2=1e-3)
        return p["w"]
    assert run().tobytes() == run().tobytes()


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = cluster_preset(epochs=7, seed=4)
    cfg.model = SMALL
    model = build_cluster_model(3, 4, SMALL, seed=2)
    for v in model.parameters().values():
        v[...] = rng.normal(size=v.shape) * 1e-300 if v.size % 2 else rng.normal(size=v.shape)
    path = tmp_path / "ck.json"
    save_checkpoint(path, model, cfg, {"k": 4})
    params, cfg2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"k": 4}
    for k, v in model.parameters().items():
        assert params[k].tobytes() == v.tobytes()
    other = build_cluster_model(3, 4, SMALL, seed=99)
    load_params_into(other, params)
    for k, v in model.parameters().items():
        assert other.parameters()[k].tobytes() == v.tobytes()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="kmeans")
    cfg = cluster_preset()
    assert (cfg.model.mp_layers, cfg.model.mp_channels, cfg.model.delta) == (2, 512, 0.311)
    assert (cfg.alpha1, cfg.alpha2, cfg.lr) == (0.785, 0.514, 1e-3)
    m = mutag_preset()
    assert (m.model.mp_channels, m.model.delta, m.model.mlp_layers, m.l2, m.batch_size) == (
        32, 1.644, 3, 1e-4, 8)
