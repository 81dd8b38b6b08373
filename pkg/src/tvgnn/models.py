"""Clustering and pooled-classification architectures and their training loops."""
from __future__ import annotations

import base64
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape, backward
from .errors import (
    ClassTooSmall, DimensionMismatch, NoisyConfig, NonFiniteLoss, NonFiniteValue,
)
from .graph import Graph, is_connected, make_rng, sym_norm_adjacency
from .layers import (
    GcnParams, GtvConvParams, MlpParams, gcn_forward, gcn_propagation, glorot,
    gtvconv_forward, mlp_assign, mlp_logits,
)
from .losses import TvLossConfig, cross_entropy_loss, dmon_loss, mincut_loss, tvgnn_loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOSSES = ("tvgnn", "mincut", "dmon")


@dataclass
class ModelConfig:
    """Architecture widths. ``mlp_layers`` counts hidden layers of the
    assignment MLP; a linear layer to K outputs always follows."""

    conv: str = "gtv"
    mp_layers: int = 2
    mp_channels: int = 512
    mp_activation: str = "elu"
    delta: float = 0.311
    epsilon: float = 1e-3
    variant: str = "simplified"
    mlp_layers: int = 1
    mlp_channels: int = 256
    mlp_activation: str = "relu"
    # classification only
    k_pool: int | None = None
    post_mp_layers: int = 1


@dataclass
class TrainConfig:
    epochs: int = 10000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_a: float = 1e-8
    loss: str = "tvgnn"
    alpha1: float = 0.785
    alpha2: float = 0.514
    rho: float | None = None
    quantile_grad: bool = True
    dmon_reg_weight: float = 1.0
    dmon_normalized: bool = False
    seed: int = 0
    patience: int = 20
    l2: float = 0.0
    batch_size: int = 8
    val_fraction: float = 0.1
    log_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")

    def tv_config(self) -> TvLossConfig:
        return TvLossConfig(self.alpha1, self.alpha2, self.rho, self.quantile_grad)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        return cls(model=model, **d)


def cluster_preset(**overrides) -> TrainConfig:
    """Vertex-clustering column of the published hyperparameter table."""
    cfg = TrainConfig(epochs=10000, lr=1e-3, alpha1=0.785, alpha2=0.514, l2=0.0,
                      model=ModelConfig(mp_layers=2, mp_channels=512, mp_activation="elu",
                                        delta=0.311, mlp_layers=1, mlp_channels=256,
                                        mlp_activation="relu"))
    return _override(cfg, overrides)


def mutag_preset(**overrides) -> TrainConfig:
    """MUTAG column of the published hyperparameter table."""
    cfg = TrainConfig(epochs=500, lr=1e-2, alpha1=0.623, alpha2=0.832, l2=1e-4,
                      batch_size=8, patience=20,
                      model=ModelConfig(mp_layers=1, mp_channels=32, mp_activation="elu",
                                        delta=1.644, mlp_layers=3, mlp_channels=64,
                                        mlp_activation="relu", post_mp_layers=1))
    return _override(cfg, overrides)


def _override(cfg, overrides):
    model_keys = {f.name for f in fields(ModelConfig)}
    for key, val in overrides.items():
        target = cfg.model if key in model_keys else cfg
        if not hasattr(target, key):
            raise KeyError(key)
        setattr(target, key, val)
    cfg.__post_init__()
    return cfg


# -- architectures ----------------------------------------------------------

def _mp_stack(rng, f_in, mcfg: ModelConfig, n_layers, prefix):
    layers = []
    for i in range(n_layers):
        w = glorot(rng, f_in, mcfg.mp_channels)
        name = f"{prefix}.{i}"
        if mcfg.conv == "gtv":
            layers.append(GtvConvParams(w, mcfg.delta, mcfg.epsilon, mcfg.mp_activation,
                                        mcfg.variant, name))
        elif mcfg.conv == "gcn":
            layers.append(GcnParams(w, mcfg.mp_activation, name))
        else:
            raise ValueError(f"unknown conv {mcfg.conv!r}")
        f_in = mcfg.mp_channels
    return layers, f_in


def _run_mp(layers, g: Graph, x: int, tape: Tape) -> int:
    prop = None
    for layer in layers:
        if isinstance(layer, GtvConvParams):
            x = gtvconv_forward(g, x, layer, tape)
        else:
            if prop is None:
                prop = gcn_propagation(g)
            x = gcn_forward(g, x, layer, tape, prop)
    return x


def _collect(*parts) -> dict:
    params = {}
    for part in parts:
        params.update(part.parameters())
    return params


@dataclass
class ClusterModel:
    mp_layers: list
    assign_mlp: MlpParams
    k: int

    def parameters(self) -> dict:
        return _collect(*self.mp_layers, self.assign_mlp)


def build_cluster_model(f_in: int, k: int, mcfg: ModelConfig, seed: int) -> ClusterModel:
    rng = make_rng(seed)
    mp, width = _mp_stack(rng, f_in, mcfg, mcfg.mp_layers, "mp")
    widths = [width] + [mcfg.mlp_channels] * mcfg.mlp_layers + [k]
    mlp = MlpParams.init(rng, widths, mcfg.mlp_activation, "assign")
    return ClusterModel(mp, mlp, k)


def cluster_forward(model: ClusterModel, g: Graph, tape: Tape) -> int:
    """Soft assignments S (N x K) for the vertices of ``g``."""
    f_in = (model.mp_layers[0].weight.shape[0] if model.mp_layers
            else model.assign_mlp.weights[0].shape[0])
    if g.n_features != f_in:
        raise DimensionMismatch(f"graph has {g.n_features} features, model expects {f_in}")
    x = _run_mp(model.mp_layers, g, tape.constant(g.features), tape)
    return mlp_assign(x, model.assign_mlp, tape)


def clustering_loss(g: Graph, s: int, cfg: TrainConfig, tape: Tape, a_tilde=None):
    if cfg.loss == "tvgnn":
        return tvgnn_loss(g, s, cfg.tv_config(), tape)
    if cfg.loss == "mincut":
        return mincut_loss(g, s, tape, a_tilde)
    return dmon_loss(g, s, tape, cfg.dmon_normalized, cfg.dmon_reg_weight)


def _weight_decay(name: str) -> bool:
    return name.endswith("weight")


def train_cluster(g: Graph, k: int, cfg: TrainConfig, on_epoch=None):
    """Full-graph Adam training on the unsupervised loss.

    Returns ``(model, S, history)`` where ``history`` is a list of dicts with
    the epoch, the total loss and every loss component.
    """
    if k < 2:
        raise NoisyConfig("need at least two clusters")
    if k >= g.n_vertices:
        raise NoisyConfig(f"K={k} is not smaller than N={g.n_vertices}")
    if not is_connected(g):
        log.warning("graph is not connected; clusters may follow components")
    model = build_cluster_model(g.n_features, k, cfg.model, cfg.seed)
    params = model.parameters()
    state = AdamState()
    a_tilde = sym_norm_adjacency(g) if cfg.loss == "mincut" else None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        tape = Tape()
        try:
            s = cluster_forward(model, g, tape)
            loss, report = clustering_loss(g, s, cfg, tape, a_tilde)
            grads = backward(tape, loss)
        except NonFiniteValue as exc:
            raise NonFiniteLoss(epoch, str(exc)) from exc
        if not all(np.all(np.isfinite(v)) for v in grads.values()):
            raise NonFiniteLoss(epoch, "non-finite gradient")
        history.append({"epoch": epoch, "total": report.total, **report.components})
        if cfg.log_every and epoch % cfg.log_every == 0:
            _check_simplex(tape.value(s), epoch)
            log.info("epoch %d loss %.6f %s", epoch, report.total, report.components)
        if on_epoch is not None:
            on_epoch(epoch, tape.value(s), report)
        adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_a,
                  cfg.l2, _weight_decay)
    tape = Tape()
    s_final = tape.value(cluster_forward(model, g, tape)).copy()
    _check_simplex(s_final, cfg.epochs)
    return model, s_final, history


def _check_simplex(s, epoch):
    if np.any(s < 0) or np.any(s > 1) or np.max(np.abs(s.sum(axis=1) - 1)) > 1e-9:
        raise NonFiniteLoss(epoch, "assignment rows left the simplex")


# -- pooling and classification ---------------------------------------------

def pool(a_tilde, x: int, s: int, tape: Tape):
    """Coarsen: dense ``S^T A S`` (K x K) and the tape node ``S^T X``.

    The coarsened adjacency keeps its diagonal; :func:`pooled_graph` drops it
    before the matrix is used for message passing.
    """
    sv = tape.value(s)
    xv = tape.value(x)
    if sv.shape[0] != a_tilde.shape[0] or xv.shape[0] != sv.shape[0]:
        raise DimensionMismatch(
            f"pool: adjacency {a_tilde.shape}, S {sv.shape}, X {xv.shape}"
        )
    a_pool = sv.T @ np.asarray(a_tilde @ sv)
    a_pool = 0.5 * (a_pool + a_pool.T)
    x_pool = tape.matmul(tape.transpose(s), x)
    return a_pool, x_pool


def pooled_graph(a_pool: np.ndarray, features: np.ndarray) -> Graph:
    a = np.array(a_pool, dtype=np.float64)
    np.fill_diagonal(a, 0.0)
    return Graph(sp.csr_matrix(a), features)


@dataclass
class PoolBlock:
    mp: list
    assign: MlpParams


@dataclass
class ClassifierModel:
    blocks: list
    post_mp: list
    head: MlpParams
    readout: str = "mean"

    def parameters(self) -> dict:
        parts = []
        for b in self.blocks:
            parts.extend(b.mp)
            parts.append(b.assign)
        parts.extend(self.post_mp)
        parts.append(self.head)
        return _collect(*parts)


def build_classifier(f_in: int, n_classes: int, k_pool: int, mcfg: ModelConfig,
                     seed: int, n_blocks: int = 1) -> ClassifierModel:
    rng = make_rng(seed)
    blocks = []
    width = f_in
    for b in range(n_blocks):
        mp, width = _mp_stack(rng, width, mcfg, mcfg.mp_layers, f"block{b}.mp")
        widths = [width] + [mcfg.mlp_channels] * mcfg.mlp_layers + [k_pool]
        blocks.append(PoolBlock(mp, MlpParams.init(rng, widths, mcfg.mlp_activation,
                                                   f"block{b}.assign")))
    post, width = _mp_stack(rng, width, mcfg, mcfg.post_mp_layers, "post.mp")
    head = MlpParams.init(rng, [width, n_classes], "identity", "head")
    return ClassifierModel(blocks, post, head)


def classify_forward(model: ClassifierModel, g: Graph, tape: Tape, force_s=None):
    """Class logits (1 x C) and the ``(graph, S)`` pair of every pooling block.

    ``force_s`` optionally replaces the learned assignments (one array per
    block), which is useful for checking the pooling path in isolation.
    """
    x = tape.constant(g.features)
    cur = g
    assignments = []
    for b, block in enumerate(model.blocks):
        x = _run_mp(block.mp, cur, x, tape)
        if force_s is not None:
            s = tape.constant(force_s[b])
        else:
            s = mlp_assign(x, block.assign, tape)
        assignments.append((cur, s))
        a_tilde = sym_norm_adjacency(cur, allow_isolated=True)
        a_pool, x = pool(a_tilde, x, s, tape)
        cur = pooled_graph(a_pool, tape.value(x))
    x = _run_mp(model.post_mp, cur, x, tape)
    n = tape.value(x).shape[0]
    if model.readout == "mean":
        x = tape.div_const(tape.sum(x, axis=0), n)
    else:
        x = tape.sum(x, axis=0)
    return mlp_logits(x, model.head, tape), assignments


def graph_loss(model, g: Graph, cfg: TrainConfig, tape: Tape):
    """Cross-entropy plus one auxiliary clustering loss per pooling block."""
    logits, assignments = classify_forward(model, g, tape)
    total = cross_entropy_loss(logits, g.graph_label, tape)
    for cur, s in assignments:
        if cur.n_edges == 0:
            continue
        aux, _ = clustering_loss(cur, s, cfg, tape,
                                 sym_norm_adjacency(cur, allow_isolated=True))
        total = tape.add(total, aux)
    return total, logits


def stratified_kfold(labels, folds: int, seed: int = 0):
    """Seeded stratified split into ``folds`` (train, test) index pairs."""
    labels = np.asarray(labels, dtype=np.int64)
    if folds < 2:
        raise ValueError("need at least two folds")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < folds):
        small = classes[counts < folds][0]
        raise ClassTooSmall(f"class {small} has fewer than {folds} members")
    rng = make_rng(seed)
    assign = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        # continue the round-robin across classes so fold sizes stay even
        assign[members] = (np.arange(len(members)) + offset) % folds
        offset += len(members)
    out = []
    for f in range(folds):
        test = np.flatnonzero(assign == f)
        train = np.flatnonzero(assign != f)
        out.append((train, test))
    return out


def stratified_holdout(labels, fraction: float, rng):
    """Split indices into (keep, holdout) with ``fraction`` of each class held out."""
    labels = np.asarray(labels)
    keep, hold = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_hold = int(round(fraction * len(members)))
        if len(members) > 1:
            n_hold = min(max(n_hold, 1), len(members) - 1)
        else:
            n_hold = 0
        hold.extend(members[:n_hold])
        keep.extend(members[n_hold:])
    return np.sort(np.asarray(keep, dtype=np.int64)), np.sort(np.asarray(hold, dtype=np.int64))


def _evaluate(model, graphs, cfg):
    if not graphs:
        return float("nan"), float("nan")
    losses, correct = 0.0, 0
    for g in graphs:
        tape = Tape()
        loss, logits = graph_loss(model, g, cfg, tape)
        losses += float(tape.value(loss))
        correct += int(np.argmax(tape.value(logits)) == g.graph_label)
    return losses / len(graphs), correct / len(graphs)


def default_k_pool(graphs) -> int:
    return max(1, math.ceil(np.mean([g.n_vertices for g in graphs]) / 2))


def train_classifier(data, cfg: TrainConfig, split):
    """Train on ``split[0]`` with early stopping on a stratified validation
    subset, then score ``split[1]``.

    Gradients of ``cfg.batch_size`` graphs are averaged before each Adam step.
    Returns ``(model, metrics)``.
    """
    train_ids, test_ids = (np.asarray(s, dtype=np.int64) for s in split)
    graphs = data.graphs
    labels = np.array([g.graph_label for g in graphs])
    if len(np.unique(labels[train_ids])) < 2:
        raise ClassTooSmall("training split needs at least two classes")
    rng = make_rng(cfg.seed)
    fit_ids, val_ids = stratified_holdout(labels[train_ids], cfg.val_fraction, rng)
    fit_ids, val_ids = train_ids[fit_ids], train_ids[val_ids]
    k_pool = cfg.model.k_pool or default_k_pool(graphs)
    model = build_classifier(graphs[0].n_features, data.class_count, k_pool, cfg.model,
                             cfg.seed)
    params = model.parameters()
    state = AdamState()
    val_graphs = [graphs[i] for i in val_ids]

    best = (np.inf, None, 0)
    wait = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(fit_ids)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for i in batch:
                tape = Tape()
                try:
                    loss, _ = graph_loss(model, graphs[i], cfg, tape)
                    grads = backward(tape, loss, seed=1.0 / len(batch))
                except NonFiniteValue as exc:
                    raise NonFiniteLoss(epoch, str(exc)) from exc
                for k, v in grads.items():
                    acc[k] += v
            adam_step(params, acc, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_a,
                      cfg.l2, _weight_decay)
        val_loss, val_acc = _evaluate(model, val_graphs, cfg)
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(epoch, "validation loss")
        if val_loss < best[0]:
            best = (val_loss, copy.deepcopy(params), epoch)
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if best[1] is not None:
        for k, v in best[1].items():
            params[k][...] = v
    _, test_acc = _evaluate(model, [graphs[i] for i in test_ids], cfg)
    _, val_acc = _evaluate(model, val_graphs, cfg)
    metrics = {
        "test_accuracy": test_acc,
        "val_accuracy": val_acc,
        "val_loss": best[0],
        "best_epoch": best[2],
        "epochs": epoch,
    }
    return model, metrics


# -- checkpoints ------------------------------------------------------------

def _encode(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def save_checkpoint(path, model, cfg: TrainConfig, meta=None) -> None:
    doc = {
        "format": "tvgnn-checkpoint/1",
        "config": asdict(cfg),
        "meta": meta or {},
        "params": {k: _encode(v) for k, v in model.parameters().items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Return ``(params, cfg, meta)`` from a checkpoint file."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    params = {k: _decode(v) for k, v in doc["params"].items()}
    return params, TrainConfig.from_dict(doc["config"]), doc.get("meta", {})


def load_params_into(model, params: dict) -> None:
    own = model.parameters()
    if set(own) != set(params):
        raise KeyError(f"parameter names differ: {sorted(set(own) ^ set(params))}")
    for k, v in params.items():
        if own[k].shape != v.shape:
            raise DimensionMismatch(f"{k}: {own[k].shape} vs {v.shape}")
        own[k][...] = v
