"""Partition scores, cut diagnostics and sharpness artifacts."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import LengthMismatch, NonSquare
from .graph import Graph

LOG_FLOOR = 1e-12


def argmax_partition(s) -> np.ndarray:
    """Hard assignments; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(np.asarray(s, dtype=np.float64), axis=1).astype(np.int64)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.int64).ravel()
    b = np.asarray(b, dtype=np.int64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"partitions of length {a.size} and {b.size}")
    return a, b


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def contingency(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if a.size else 0, bi.max() + 1 if b.size else 0))
    np.add.at(table, (ai, bi), 1.0)
    return table


def nmi(a, b) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Returns 0 when either partition is constant.
    """
    a, b = _check_pair(a, b)
    if a.size == 0:
        return 0.0
    table = contingency(a, b)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha <= 0 or hb <= 0:
        return 0.0
    n = table.sum()
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(min(1.0, max(0.0, mi / (0.5 * (ha + hb)))))


def _best_mass(m) -> float:
    if m.shape[0] == 0:
        return 0.0
    r, c = linear_sum_assignment(m, maximize=True)
    return float(m[r, c].sum())


def kuhn_munkres(confusion) -> np.ndarray:
    """Mass-maximizing permutation ``perm`` (row ``i`` -> column ``perm[i]``).

    Among optimal permutations the lexicographically smallest is returned:
    rows are fixed in order, each to the lowest column that keeps the optimum
    reachable.
    """
    m = np.asarray(confusion, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NonSquare(f"confusion matrix of shape {m.shape}")
    if np.any(m < 0):
        raise ValueError("confusion entries must be nonnegative")
    k = m.shape[0]
    best = _best_mass(m)
    tol = 1e-9 * max(1.0, abs(best))
    perm = np.empty(k, dtype=np.int64)
    rows = list(range(k))
    cols = list(range(k))
    acc = 0.0
    for r in range(k):
        rows.remove(r)
        for c in cols:
            rest = [x for x in cols if x != c]
            sub = m[np.ix_(rows, rest)]
            if acc + m[r, c] + _best_mass(sub) >= best - tol:
                perm[r] = c
                acc += m[r, c]
                cols.remove(c)
                break
    return perm


def kuhn_munkres_exhaustive(confusion):
    """Brute-force reference: ``(perm, mass)`` over all permutations."""
    m = np.asarray(confusion, dtype=np.float64)
    k = m.shape[0]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(k)):
        mass = m[np.arange(k), list(perm)].sum()
        if mass > best:
            best, best_perm = mass, perm
    return np.array(best_perm, dtype=np.int64), float(best)


def accuracy(labels, clusters) -> float:
    """Fraction of vertices whose cluster maps to their label under the best
    one-to-one matching."""
    labels, clusters = _check_pair(labels, clusters)
    if labels.size == 0:
        return 0.0
    size = int(max(labels.max(), clusters.max())) + 1
    conf = np.zeros((size, size))
    np.add.at(conf, (clusters, labels), 1.0)
    perm = kuhn_munkres(conf)
    return float(conf[np.arange(size), perm].sum() / labels.size)


@dataclass
class CutReport:
    cuts: np.ndarray
    sizes: np.ndarray
    ratio: float

    @property
    def infinite(self) -> bool:
        return math.isinf(self.ratio)


def cut_value(g: Graph, p, k: int | None = None) -> CutReport:
    """Per-cluster cuts and the sum of ``cut_k / min((K-1)|C_k|, |complement|)``.

    The ratio is ``inf`` when a cluster or its complement is empty.
    """
    p = np.asarray(p, dtype=np.int64).ravel()
    if p.size != g.n_vertices:
        raise LengthMismatch(f"{p.size} assignments for {g.n_vertices} vertices")
    if k is None:
        k = int(p.max()) + 1 if p.size else 0
    k = max(k, 2)
    cuts = np.zeros(k)
    i, j, w = g.edge_list()
    crossing = p[i] != p[j]
    np.add.at(cuts, p[i][crossing], w[crossing])
    np.add.at(cuts, p[j][crossing], w[crossing])
    sizes = np.bincount(p, minlength=k)
    s_hat = np.minimum((k - 1) * sizes, p.size - sizes).astype(np.float64)
    if np.any(s_hat == 0):
        ratio = math.inf
    else:
        ratio = float((cuts / s_hat).sum())
    return CutReport(cuts, sizes, ratio)


def sharpness_matrix(s, order=None) -> np.ndarray:
    """``log(max(S S^T, 1e-12))`` with rows and columns sorted by ``order``
    (stable, so vertices of equal order keep their index order)."""
    s = np.asarray(s, dtype=np.float64)
    m = np.log(np.maximum(s @ s.T, LOG_FLOOR))
    if order is not None:
        idx = np.argsort(np.asarray(order), kind="stable")
        m = m[np.ix_(idx, idx)]
    return m


def max_assignment_profile(s, order=None, ascending: bool = False) -> np.ndarray:
    """Largest entry of every row of ``s``.

    ``order`` lists vertex ids in display order (e.g. positions along a
    ring); ``ascending`` sorts the values instead.
    """
    prof = np.asarray(s, dtype=np.float64).max(axis=1)
    if order is not None:
        prof = prof[np.asarray(order, dtype=np.int64)]
    if ascending:
        prof = np.sort(prof)
    return prof


def cluster_balance(p, k: int):
    """Cluster sizes and their entropy divided by ``log K``."""
    p = np.asarray(p, dtype=np.int64).ravel()
    sizes = np.bincount(p, minlength=k)
    if k <= 1 or p.size == 0:
        return sizes, 1.0 if k == 1 else 0.0
    return sizes, _entropy(sizes.astype(np.float64)) / math.log(k)


def ring_arcs(p, order=None) -> dict:
    """Number of maximal runs of every cluster along a cycle.

    ``order`` is the vertex sequence around the cycle (identity if omitted).
    """
    p = np.asarray(p, dtype=np.int64).ravel()
    if order is not None:
        p = p[np.asarray(order, dtype=np.int64)]
    if p.size == 0:
        return {}
    starts = p != np.roll(p, 1)
    arcs = {int(c): 0 for c in np.unique(p)}
    if not starts.any():
        arcs[int(p[0])] = 1
        return arcs
    for c in p[starts]:
        arcs[int(c)] += 1
    return arcs


def is_contiguous_ring(p, order=None) -> bool:
    """True when every non-empty cluster occupies a single arc of the cycle."""
    return all(v == 1 for v in ring_arcs(p, order).values())


# -- serialization -----------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_csv(rows, path, header=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_pgm_bytes(m, floor: float = LOG_FLOOR) -> bytes:
    """8-bit binary PGM; ``[log(floor), 0]`` maps linearly onto ``[0, 255]``."""
    m = np.asarray(m, dtype=np.float64)
    lo = math.log(floor)
    scaled = np.clip((m - lo) / -lo, 0.0, 1.0)
    pix = np.rint(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(m, path, floor: float = LOG_FLOOR) -> None:
    with open(path, "wb") as fh:
        fh.write(to_pgm_bytes(m, floor))
