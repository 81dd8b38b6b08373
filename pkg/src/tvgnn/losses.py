"""Unsupervised clustering objectives and the supervised cross-entropy.

All losses record onto a :class:`~tvgnn.autodiff.Tape` and return the scalar
node together with a :class:`LossReport` holding plain float components.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import (
    DimensionMismatch, EmptyAssignment, EmptyGraph, EmptyVector, LabelOutOfRange,
)
from .graph import Graph, sym_norm_adjacency


@dataclass
class TvLossConfig:
    """Coefficients of ``alpha1 * L_gtv + alpha2 * L_an``.

    ``rho=None`` means ``K - 1``. ``quantile_grad`` routes the gradient of the
    balance term through the vertex selected as the quantile; with False the
    quantile is a constant of the backward pass.
    """

    alpha1: float = 1.0
    alpha2: float = 1.0
    rho: float | None = None
    quantile_grad: bool = True

    def __post_init__(self):
        if self.rho is not None and self.rho < 1:
            raise ValueError(f"rho must be >= 1, got {self.rho}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss coefficients must be nonnegative")

    def rho_for(self, k: int) -> float:
        return float(k - 1) if self.rho is None else float(self.rho)


@dataclass
class LossReport:
    total: float
    components: dict = field(default_factory=dict)


def _check_rows(g: Graph, s: int, tape: Tape):
    shape = tape.value(s).shape
    if len(shape) != 2 or shape[0] != g.n_vertices:
        raise DimensionMismatch(f"assignment shape {shape} for {g.n_vertices} vertices")
    return shape


def quant_rho(s, rho: float):
    """``(q+1)``-st largest entry of ``s`` with ``q = floor(N / (rho + 1))``.

    Returns ``(value, index)``; among equal values the smallest index wins.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    n = s.size
    if n == 0:
        raise EmptyVector("quantile of an empty vector")
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    q = min(int(math.floor(n / (rho + 1))), n - 1)
    order = np.lexsort((np.arange(n), -s))
    idx = int(order[q])
    return float(s[idx]), idx


def gtv_loss_raw(g: Graph, s: int, tape: Tape) -> int:
    """Sum over undirected edges and clusters of ``a_ij |s_ik - s_jk|``."""
    _check_rows(g, s, tape)
    diffs = tape.spmm(g.incidence, s)
    return tape.sum(tape.abs(diffs))


def an_loss_raw(s: int, rho: float, tape: Tape, quantile_grad: bool = True) -> int:
    """Asymmetric l1 distance of every column from its rho-quantile."""
    sv = tape.value(s)
    if sv.ndim != 2 or sv.size == 0:
        raise EmptyAssignment(f"assignment of shape {sv.shape}")
    n, k = sv.shape
    mask = np.zeros_like(sv)
    picks = [quant_rho(sv[:, c], rho)[1] for c in range(k)]
    mask[picks, np.arange(k)] = 1.0
    ones = tape.constant(np.ones((n, 1)))
    if quantile_grad:
        quant = tape.sum(tape.mul(s, tape.constant(mask)), axis=0)
    else:
        quant = tape.constant((sv * mask).sum(axis=0, keepdims=True))
    resid = tape.sub(s, tape.matmul(ones, quant))
    # the selected entries are identically zero, not a kink
    exempt = mask.astype(bool) if quantile_grad else None
    return tape.sum(tape.asym_abs(resid, rho, exempt=exempt))


def beta(n: int, k: int, rho: float) -> float:
    """Largest attainable value of the raw balance term, used for rescaling."""
    if rho == k - 1:
        return float(n * rho)
    return float(n * rho * min(1.0, k / (rho + 1)))


def tvgnn_loss(g: Graph, s: int, cfg: TvLossConfig, tape: Tape):
    """``alpha1 * L*_gtv / (2E) + alpha2 * (beta - L*_an) / beta``.

    ``E`` is the total edge weight, which is the edge count on unweighted
    graphs and keeps the first term in [0, 1] on weighted ones.
    """
    n, k = _check_rows(g, s, tape)
    if g.n_edges == 0:
        raise EmptyGraph("total variation loss needs at least one edge")
    rho = cfg.rho_for(k)
    gtv = tape.div_const(gtv_loss_raw(g, s, tape), 2 * g.total_weight)
    b = beta(n, k, rho)
    an_raw = an_loss_raw(s, rho, tape, cfg.quantile_grad)
    an = tape.scale(tape.sub(tape.constant(b), an_raw), 1.0 / b)
    total = tape.add(tape.scale(gtv, cfg.alpha1), tape.scale(an, cfg.alpha2))
    report = LossReport(
        float(tape.value(total)),
        {"gtv": float(tape.value(gtv)), "an": float(tape.value(an))},
    )
    return total, report


def mincut_loss(g: Graph, s: int, tape: Tape, a_tilde=None):
    """Normalized-cut term plus orthogonality regularizer."""
    _, k = _check_rows(g, s, tape)
    if a_tilde is None:
        a_tilde = sym_norm_adjacency(g)
    d_tilde = np.asarray(a_tilde.sum(axis=1)).ravel()
    st = tape.transpose(s)
    num = tape.trace(tape.matmul(st, tape.spmm(a_tilde, s)))
    den = tape.trace(tape.matmul(st, tape.mul(tape.constant(d_tilde[:, None] * np.ones((1, k))), s)))
    cut = tape.scale(tape.div(num, den), -1.0)
    sts = tape.matmul(st, s)
    ortho = tape.fro_norm(tape.sub(
        tape.div(sts, tape.fro_norm(sts)),
        tape.constant(np.eye(k) / np.sqrt(k)),
    ))
    total = tape.add(cut, ortho)
    report = LossReport(
        float(tape.value(total)),
        {"mincut_cut": float(tape.value(cut)), "mincut_ortho": float(tape.value(ortho))},
    )
    return total, report


def dmon_loss(g: Graph, s: int, tape: Tape, normalized: bool = False,
              reg_weight: float = 1.0):
    """Modularity term and collapse regularizer.

    With ``normalized=False`` the degree product is ``S^T d^T d S``; with True
    it is divided by ``2E`` as in standard modularity. ``reg_weight`` scales
    the collapse regularizer in the total.
    """
    n, k = _check_rows(g, s, tape)
    if g.n_edges == 0:
        raise EmptyGraph("modularity needs at least one edge")
    two_e = 2.0 * g.total_weight
    st = tape.transpose(s)
    sas = tape.trace(tape.matmul(st, tape.spmm(g.adjacency, s)))
    ds = tape.matmul(tape.constant(g.degrees[None, :]), s)
    deg = tape.trace(tape.matmul(tape.transpose(ds), ds))
    if normalized:
        deg = tape.div_const(deg, two_e)
    modularity = tape.scale(tape.sub(sas, deg), -1.0 / two_e)
    sizes = tape.sum(s, axis=0)
    reg = tape.sub(tape.scale(tape.fro_norm(sizes), np.sqrt(k) / n), tape.constant(1.0))
    total = tape.add(modularity, tape.scale(reg, reg_weight))
    report = LossReport(
        float(tape.value(total)),
        {"dmon_mod": float(tape.value(modularity)), "dmon_reg": float(tape.value(reg))},
    )
    return total, report


def cross_entropy_loss(logits: int, label: int, tape: Tape) -> int:
    c = tape.value(logits).shape[-1]
    if not 0 <= int(label) < c:
        raise LabelOutOfRange(f"label {label} outside [0, {c})")
    return tape.softmax_xent(logits, [int(label)])
