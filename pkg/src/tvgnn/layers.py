"""Message-passing layers and the assignment MLP.

GTVConv propagates features with ``I - delta * L_gamma`` where ``L_gamma`` is
the Laplacian of the edge reweighting ``a_ij / max(||x_i - x_j||_1, eps)``.
The reweighting is rebuilt from each layer's input features and enters the
tape as a constant, so no gradient reaches it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape
from .errors import AsymmetricInput, DimensionMismatch, IsolatedVertex
from .graph import Graph, _sym_norm

ACTIVATIONS = ("identity", "relu", "elu")
DEFAULT_EPS = 1e-3


def glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GtvConvParams:
    weight: np.ndarray
    delta: float
    epsilon: float = DEFAULT_EPS
    activation: str = "identity"
    variant: str = "simplified"
    name: str = "gtv"

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.variant not in ("simplified", "degree-weighted"):
            raise ValueError(f"unknown GTVConv variant {self.variant!r}")

    def parameters(self):
        return {f"{self.name}.weight": self.weight}


@dataclass
class GcnParams:
    weight: np.ndarray
    activation: str = "identity"
    name: str = "gcn"

    def parameters(self):
        return {f"{self.name}.weight": self.weight}


@dataclass
class MlpParams:
    """Hidden layers followed by a linear map to ``k`` logits.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; biases are row vectors.
    """

    weights: list
    biases: list
    activation: str = "relu"
    name: str = "mlp"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight and at least one layer")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (1, w.shape[1]):
                raise DimensionMismatch(f"bias {b.shape} for weight {w.shape}")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise DimensionMismatch(f"MLP widths do not chain: {w0.shape} -> {w1.shape}")

    @property
    def k(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, rng, widths, activation="relu", name="mlp"):
        """Glorot-uniform weights and zero biases for consecutive ``widths``."""
        weights = [glorot(rng, a, b) for a, b in zip(widths, widths[1:])]
        biases = [np.zeros((1, b)) for b in widths[1:]]
        return cls(weights, biases, activation, name)

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.{i}.weight"] = w
            out[f"{self.name}.{i}.bias"] = b
        return out


def build_gamma_hat(g: Graph, x: np.ndarray, eps: float = DEFAULT_EPS) -> sp.csr_matrix:
    """Edge weights ``a_ij / max(||x_i - x_j||_1, eps)`` on the pattern of A."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != g.n_vertices:
        raise DimensionMismatch(f"{x.shape[0]} feature rows for {g.n_vertices} vertices")
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = g.adjacency
    rows = np.repeat(np.arange(g.n_vertices), np.diff(a.indptr))
    dist = np.abs(x[rows] - x[a.indices]).sum(axis=1)
    data = a.data / np.maximum(dist, eps)
    return sp.csr_matrix((data, a.indices.copy(), a.indptr.copy()), shape=a.shape)


def _weighted_gamma(g: Graph, x: np.ndarray, eps: float) -> sp.csr_matrix:
    # gamma_ij = a_ij / max(eps, ||sqrt(a_ij/d_i) x_i - sqrt(a_ij/d_j) x_j||_1)
    a = g.adjacency
    d = g.degrees
    zero = np.flatnonzero(d <= 0)
    if len(zero):
        raise IsolatedVertex(int(zero[0]))
    rows = np.repeat(np.arange(g.n_vertices), np.diff(a.indptr))
    cols = a.indices
    q = (np.sqrt(a.data / d[rows])[:, None] * x[rows]
         - np.sqrt(a.data / d[cols])[:, None] * x[cols])
    data = a.data / np.maximum(np.abs(q).sum(axis=1), eps)
    return sp.csr_matrix((data, cols.copy(), a.indptr.copy()), shape=a.shape)


def gtv_laplacian(gamma) -> sp.csr_matrix:
    """``diag(gamma @ 1) - gamma``."""
    gamma = sp.csr_matrix(gamma, dtype=np.float64)
    diff = abs(gamma - gamma.T)
    if diff.nnz and diff.max() > 1e-12 * max(1.0, abs(gamma).max()):
        raise AsymmetricInput("connectivity matrix is not symmetric")
    if gamma.diagonal().any():
        raise AsymmetricInput("connectivity matrix must have a zero diagonal")
    deg = np.asarray(gamma.sum(axis=1)).ravel()
    lap = sp.diags(deg) - gamma
    lap = sp.csr_matrix(lap)
    lap.sort_indices()
    return lap


def propagation_matrix(g: Graph, x: np.ndarray, delta: float, eps: float = DEFAULT_EPS,
                       variant: str = "simplified") -> sp.csr_matrix:
    """``I - delta * L`` for the chosen GTV Laplacian, evaluated at ``x``."""
    n = g.n_vertices
    if variant == "simplified":
        lap = gtv_laplacian(build_gamma_hat(g, x, eps))
    elif variant == "degree-weighted":
        lap = gtv_laplacian(_weighted_gamma(g, np.asarray(x, dtype=np.float64), eps))
        inv_sqrt = sp.diags(1.0 / np.sqrt(g.degrees))
        lap = inv_sqrt @ lap @ inv_sqrt
    else:
        raise ValueError(f"unknown variant {variant!r}")
    prop = sp.csr_matrix(sp.identity(n) - delta * lap)
    prop.sort_indices()
    return prop


def gtvconv_forward(g: Graph, x: int, p: GtvConvParams, tape: Tape) -> int:
    """``act((I - delta L_gamma) X W)`` with L_gamma built from the value of ``x``."""
    xv = tape.value(x)
    if xv.shape[0] != g.n_vertices or xv.shape[1] != p.weight.shape[0]:
        raise DimensionMismatch(
            f"input {xv.shape} incompatible with {g.n_vertices} vertices, weight {p.weight.shape}"
        )
    prop = propagation_matrix(g, xv, p.delta, p.epsilon, p.variant)
    w = tape.param(f"{p.name}.weight", p.weight)
    if p.weight.shape[1] < p.weight.shape[0]:
        h = tape.spmm(prop, tape.matmul(x, w))
    else:
        h = tape.matmul(tape.spmm(prop, x), w)
    return tape.activation(h, p.activation)


def gtv_update_per_feature(g: Graph, x: np.ndarray, delta: float,
                           eps: float = DEFAULT_EPS) -> np.ndarray:
    """One exact GTV descent step with a separate reweighting per feature.

    Reference implementation for small graphs; each column ``f`` is updated
    as ``(I - delta L_f) x_f`` with ``gamma_ij = a_ij / max(|x_if - x_jf|, eps)``.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != g.n_vertices:
        raise DimensionMismatch(f"{x.shape[0]} feature rows for {g.n_vertices} vertices")
    out = np.empty_like(x)
    for f in range(x.shape[1]):
        col = x[:, f:f + 1]
        lap = gtv_laplacian(build_gamma_hat(g, col, eps))
        prop = sp.csr_matrix(sp.identity(g.n_vertices) - delta * lap)
        out[:, f:f + 1] = prop @ col
    return out[:, 0] if squeeze else out


def gcn_propagation(g: Graph) -> sp.csr_matrix:
    """Symmetric normalization of ``A + I``."""
    a = g.adjacency + sp.identity(g.n_vertices, format="csr")
    return _sym_norm(sp.csr_matrix(a))


def gcn_forward(g: Graph, x: int, p: GcnParams, tape: Tape, prop=None) -> int:
    xv = tape.value(x)
    if xv.shape[0] != g.n_vertices or xv.shape[1] != p.weight.shape[0]:
        raise DimensionMismatch(
            f"input {xv.shape} incompatible with {g.n_vertices} vertices, weight {p.weight.shape}"
        )
    if prop is None:
        prop = gcn_propagation(g)
    w = tape.param(f"{p.name}.weight", p.weight)
    h = tape.matmul(tape.spmm(prop, x), w)
    return tape.activation(h, p.activation)


def mlp_logits(x: int, p: MlpParams, tape: Tape) -> int:
    width = tape.value(x).shape[1]
    if width != p.weights[0].shape[0]:
        raise DimensionMismatch(f"input width {width}, MLP expects {p.weights[0].shape[0]}")
    n = tape.value(x).shape[0]
    ones = tape.constant(np.ones((n, 1)))
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        wi = tape.param(f"{p.name}.{i}.weight", w)
        bi = tape.param(f"{p.name}.{i}.bias", b)
        h = tape.add(tape.matmul(h, wi), tape.matmul(ones, bi))
        if i < last:
            h = tape.activation(h, p.activation)
    return h


def mlp_assign(x: int, p: MlpParams, tape: Tape) -> int:
    """Row-softmax of the MLP output: soft assignments, one row per vertex."""
    return tape.softmax(mlp_logits(x, p, tape))
