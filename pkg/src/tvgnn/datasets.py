"""Readers and canonical writers for the on-disk graph formats.

Edge list: one ``src<TAB>dst[<TAB>weight]`` per line, 0-based ids, lines
starting with ``#`` ignored (any run of whitespace is accepted as separator).
Features: headerless CSV, row ``i`` belongs to vertex ``i``.
Labels: one integer per line.
Graph collections: JSON lines, each an object with ``edges``, ``label`` and
either ``features`` or ``"degrees_as_features": true``.

Writers emit a canonical form (upper-triangle edges in row-major order,
shortest round-trip float repr) so that load followed by write reproduces a
canonical file byte for byte.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DanglingVertexId, DimensionMismatch, EmptyCollection, ParseError
from .graph import Graph


@dataclass
class GraphCollection:
    graphs: list
    class_count: int
    original_labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.graph_label for g in self.graphs], dtype=np.int64)


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


# -- vertex datasets ---------------------------------------------------------

def read_edge_list(path):
    """Return ``(edges, weights)`` arrays from an edge-list file."""
    edges, weights = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) not in (2, 3):
                raise ParseError(f"expected 2 or 3 fields, got {len(parts)}", lineno, path)
            try:
                i, j = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path) from None
            if i < 0 or j < 0:
                raise ParseError("negative vertex id", lineno, path)
            if not np.isfinite(w) or w < 0:
                raise ParseError(f"invalid weight {parts[2]}", lineno, path)
            edges.append((i, j))
            weights.append(w)
    return (np.array(edges, dtype=np.int64).reshape(-1, 2),
            np.array(weights, dtype=np.float64))


def read_features(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                rows.append([float(v) for v in text.split(",")])
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(
                    f"row has {len(rows[-1])} values, expected {len(rows[0])}", lineno, path
                )
    if not rows:
        return np.zeros((0, 0))
    x = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ParseError("non-finite feature value", None, path)
    return x


def read_labels(path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                out.append(int(text))
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path) from None
    return np.array(out, dtype=np.int64)


def load_vertex_dataset(edge_path, feature_path, label_path=None) -> Graph:
    edges, weights = read_edge_list(edge_path)
    x = read_features(feature_path)
    n = x.shape[0]
    if len(edges) and edges.max() >= n:
        bad = int(edges.max())
        raise DanglingVertexId(f"vertex id {bad} but only {n} feature rows")
    labels = None
    if label_path is not None:
        labels = read_labels(label_path)
        if len(labels) != n:
            raise DimensionMismatch(f"{len(labels)} labels for {n} vertices")
    return Graph.from_edges(n, edges, x, weights, vertex_labels=labels)


def write_edge_list(g: Graph, path) -> None:
    lines = []
    for i, j, w in zip(*(a.tolist() for a in g.edge_list())):
        if w == 1.0:
            lines.append(f"{i}\t{j}\n")
        else:
            lines.append(f"{i}\t{j}\t{_fmt(w)}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def write_features(x: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.atleast_2d(x):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_labels(labels, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n")


def write_vertex_dataset(g: Graph, directory, stem: str = "graph") -> list:
    """Write ``<stem>.edges``, ``<stem>.features.csv`` and, if present,
    ``<stem>.labels.csv``; return the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = [os.path.join(directory, f"{stem}.edges"),
             os.path.join(directory, f"{stem}.features.csv")]
    write_edge_list(g, paths[0])
    write_features(g.features, paths[1])
    if g.vertex_labels is not None:
        paths.append(os.path.join(directory, f"{stem}.labels.csv"))
        write_labels(g.vertex_labels, paths[2])
    return paths


# -- graph collections -------------------------------------------------------

def _parse_record(rec, index, path):
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", index, path)
    try:
        raw_edges = rec["edges"]
        label = rec["label"]
    except KeyError as exc:
        raise ParseError(f"missing key {exc}", index, path) from None
    if isinstance(label, bool) or not isinstance(label, int):
        raise ParseError("label must be an integer", index, path)
    try:
        edges = np.array([e[:2] for e in raw_edges], dtype=np.int64).reshape(-1, 2)
        weights = np.array([e[2] if len(e) > 2 else 1.0 for e in raw_edges],
                           dtype=np.float64)
    except (TypeError, ValueError, IndexError):
        raise ParseError("edges must be [src, dst] or [src, dst, weight] lists",
                         index, path) from None
    if len(edges) and edges.min() < 0:
        raise ParseError("negative vertex id", index, path)
    if rec.get("degrees_as_features"):
        n = int(rec.get("n", edges.max() + 1 if len(edges) else 0))
        features = None
    elif "features" in rec:
        try:
            features = np.array(rec["features"], dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError("features must be a list of equal-length rows",
                             index, path) from None
        if features.ndim != 2:
            raise ParseError("features must be a list of equal-length rows", index, path)
        n = features.shape[0]
    else:
        raise ParseError("need 'features' or 'degrees_as_features'", index, path)
    if n == 0:
        raise ParseError("graph without vertices", index, path)
    if len(edges) and edges.max() >= n:
        raise ParseError(f"vertex id {int(edges.max())} out of range for {n} vertices",
                         index, path)
    if features is None:
        g = Graph.from_edges(n, edges, np.zeros((n, 1)), weights)
        features = g.degrees[:, None].copy()
    return Graph.from_edges(n, edges, features, weights), label


def load_graph_collection(path) -> GraphCollection:
    """Read a JSON-lines collection; labels are remapped to ``0..C-1`` in
    sorted order of their original values. Record indices are 0-based."""
    parsed = []
    with open(path, encoding="utf-8") as fh:
        index = 0
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", index, path) from None
            parsed.append(_parse_record(rec, index, path))
            index += 1
    if not parsed:
        raise EmptyCollection(f"{path}: no graphs")
    originals = sorted({lab for _, lab in parsed})
    remap = {lab: i for i, lab in enumerate(originals)}
    graphs = []
    for g, lab in parsed:
        g.graph_label = remap[lab]
        graphs.append(g)
    return GraphCollection(graphs, len(originals), originals)


def graph_record(g: Graph, label=None) -> dict:
    edges = []
    for i, j, w in zip(*(a.tolist() for a in g.edge_list())):
        edges.append([i, j] if w == 1.0 else [i, j, float(w)])
    feats = [[float(v) for v in row] for row in g.features]
    return {"edges": edges, "features": feats,
            "label": int(g.graph_label if label is None else label)}


def write_graph_collection(coll: GraphCollection, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in coll.graphs:
            fh.write(json.dumps(graph_record(g), separators=(",", ":")) + "\n")


# -- TU benchmark format -----------------------------------------------------

def read_tu_dataset(directory, name: str) -> GraphCollection:
    """Read a TU-format dataset (``<name>_A.txt`` etc., 1-based ids).

    Vertex features are the one-hot vertex labels when
    ``<name>_node_labels.txt`` exists, otherwise the vertex degree.
    """
    def path(suffix):
        return os.path.join(directory, f"{name}_{suffix}.txt")

    def ints(p):
        with open(p, encoding="utf-8") as fh:
            return [[int(v) for v in line.replace(",", " ").split()]
                    for line in fh if line.strip()]

    indicator = np.array([r[0] for r in ints(path("graph_indicator"))], dtype=np.int64)
    labels = np.array([r[0] for r in ints(path("graph_labels"))], dtype=np.int64)
    pairs = np.array(ints(path("A")), dtype=np.int64) - 1
    node_labels = None
    if os.path.exists(path("node_labels")):
        node_labels = np.array([r[0] for r in ints(path("node_labels"))], dtype=np.int64)
        node_labels -= node_labels.min()
        n_node_classes = int(node_labels.max()) + 1
    originals = sorted(set(labels.tolist()))
    remap = {lab: i for i, lab in enumerate(originals)}
    graphs = []
    for gid in range(1, len(labels) + 1):
        members = np.flatnonzero(indicator == gid)
        start = members[0]
        n = len(members)
        sel = (indicator[pairs[:, 0]] == gid)
        local = pairs[sel] - start
        if node_labels is not None:
            x = np.zeros((n, n_node_classes))
            x[np.arange(n), node_labels[members]] = 1.0
            g = Graph.from_edges(n, local, x, graph_label=remap[labels[gid - 1]])
        else:
            g = Graph.from_edges(n, local, np.zeros((n, 1)))
            g = Graph(g.adjacency, g.degrees[:, None], graph_label=remap[labels[gid - 1]])
        graphs.append(g)
    return GraphCollection(graphs, len(originals), originals)
