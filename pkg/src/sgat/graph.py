"""Immutable CSR graph with one self-loop per node.

Edge ``k`` stored in row ``i`` with ``col_idx[k] == j`` is the directed edge
``i -> j``: node ``i`` aggregates from neighbour ``j``. The reverse edge is a
separate entry with its own gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

from .errors import InputError, ShapeError, StructuralError


@dataclass(frozen=True)
class BuildReport:
    input_edges: int
    duplicates_removed: int
    self_loops_added: int


@dataclass(frozen=True)
class PruneReport:
    removed_edges: int
    candidate_edges: int
    kept_edge_ids: np.ndarray = field(repr=False)

    @property
    def removed_fraction(self) -> float:
        return self.removed_edges / self.candidate_edges if self.candidate_edges else 0.0


@dataclass(frozen=True, eq=False)
class Graph:
    n_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    self_loop_edge_id: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    build_report: Optional[BuildReport] = None

    def __post_init__(self):
        for arr in (self.row_ptr, self.col_idx, self.self_loop_edge_id, self.features,
                    self.labels, self.train_mask, self.val_mask, self.test_mask):
            arr.setflags(write=False)

    @property
    def n_edges(self) -> int:
        return int(self.col_idx.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        known = self.labels[self.labels >= 0]
        return int(known.max()) + 1 if known.size else 0

    @cached_property
    def edge_src(self) -> np.ndarray:
        """Row (aggregating node) of every edge, in CSR order."""
        src = np.repeat(np.arange(self.n_nodes), np.diff(self.row_ptr))
        src.setflags(write=False)
        return src

    @cached_property
    def is_self_loop(self) -> np.ndarray:
        flags = np.zeros(self.n_edges, dtype=bool)
        flags[self.self_loop_edge_id] = True
        flags.setflags(write=False)
        return flags

    @cached_property
    def non_self_edge_ids(self) -> np.ndarray:
        ids = np.flatnonzero(~self.is_self_loop)
        ids.setflags(write=False)
        return ids

    @property
    def n_non_self_edges(self) -> int:
        return self.n_edges - self.n_nodes

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[i]:self.row_ptr[i + 1]]

    def edges(self) -> np.ndarray:
        """``(n_edges, 2)`` array of ``(src, dst)`` pairs in CSR order."""
        return np.stack([self.edge_src, self.col_idx], axis=1)

    def with_masks(self, train, val, test) -> "Graph":
        masks = _check_masks(self.n_nodes, (train, val, test))
        return Graph(self.n_nodes, self.row_ptr, self.col_idx, self.self_loop_edge_id,
                     self.features, self.labels, *masks, build_report=self.build_report)


@dataclass(frozen=True)
class EdgeMask:
    """Per-edge gate values in [0, 1]; self-loop entries are always 1."""

    values: np.ndarray

    @classmethod
    def for_graph(cls, graph: Graph, values) -> "EdgeMask":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != graph.n_edges:
            raise ShapeError(f"mask has {values.shape[0]} entries, graph has {graph.n_edges} edges")
        if np.any(values < 0) or np.any(values > 1):
            raise StructuralError("mask values must lie in [0, 1]")
        if np.any(values[graph.self_loop_edge_id] != 1.0):
            raise StructuralError("self-loop mask entries must equal 1")
        return cls(values)

    @classmethod
    def from_non_self(cls, graph: Graph, values) -> "EdgeMask":
        """Build a full mask from gate values listed for non-self-loop edges only."""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != graph.n_non_self_edges:
            raise ShapeError(
                f"{values.shape[0]} gate values for {graph.n_non_self_edges} non-self-loop edges")
        full = np.ones(graph.n_edges)
        full[graph.non_self_edge_ids] = values
        return cls.for_graph(graph, full)


def _check_masks(n_nodes: int, masks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    out = []
    for m in masks:
        m = np.zeros(n_nodes, dtype=bool) if m is None else np.asarray(m, dtype=bool).copy()
        if m.shape != (n_nodes,):
            raise ShapeError(f"mask shape {m.shape}, expected ({n_nodes},)")
        out.append(m)
    if np.any(out[0] & out[1]) or np.any(out[0] & out[2]) or np.any(out[1] & out[2]):
        raise StructuralError("train/val/test masks must be pairwise disjoint")
    return tuple(out)


def from_edge_list(
    n_nodes: int,
    edges: Iterable[tuple[int, int]],
    features=None,
    labels=None,
    masks=(None, None, None),
    symmetrize: bool = False,
) -> Graph:
    """Build a CSR graph; duplicates collapse and every node gets a self-loop.

    ``symmetrize`` adds the reverse of every input edge (for undirected data).
    Features default to the identity matrix, labels to -1 (unknown).
    """
    if n_nodes < 1:
        raise InputError("a graph needs at least one node")
    pairs = np.array(list(edges), dtype=np.int64).reshape(-1, 2)
    bad = np.flatnonzero((pairs < 0).any(axis=1) | (pairs >= n_nodes).any(axis=1))
    if bad.size:
        k = int(bad[0])
        raise InputError(
            f"edge {k + 1} ({pairs[k, 0]}, {pairs[k, 1]}) references a node outside [0, {n_nodes})")
    n_input = pairs.shape[0]
    if symmetrize:
        pairs = np.vstack([pairs, pairs[:, ::-1]])
    loops = np.arange(n_nodes)
    has_loop = np.zeros(n_nodes, dtype=bool)
    has_loop[pairs[pairs[:, 0] == pairs[:, 1], 0]] = True
    uniq = np.unique(np.vstack([pairs, np.stack([loops, loops], axis=1)]), axis=0)
    # np.unique on rows sorts lexicographically by (src, dst): already CSR order
    expected = pairs.shape[0] + n_nodes
    counts = np.bincount(uniq[:, 0], minlength=n_nodes)
    row_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    col_idx = uniq[:, 1].astype(np.int64)
    src = uniq[:, 0]
    self_ids = np.flatnonzero(src == col_idx)
    report = BuildReport(
        input_edges=n_input,
        duplicates_removed=int(expected - uniq.shape[0] - np.count_nonzero(has_loop)),
        self_loops_added=int(n_nodes - np.count_nonzero(has_loop)),
    )

    if features is None:
        features = np.eye(n_nodes)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != n_nodes:
        raise ShapeError(f"features shape {features.shape} does not match {n_nodes} nodes")
    if labels is None:
        labels = -np.ones(n_nodes, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_nodes,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n_nodes},)")
    train, val, test = _check_masks(n_nodes, masks)
    return Graph(n_nodes, row_ptr, col_idx, self_ids, features.copy(), labels.copy(),
                 train, val, test, build_report=report)


def subgraph_keep(graph: Graph, keep) -> tuple[Graph, PruneReport]:
    """Keep the flagged edges; self-loops survive regardless of ``keep``."""
    keep = np.asarray(keep, dtype=bool).reshape(-1)
    if keep.shape[0] != graph.n_edges:
        raise ShapeError(f"keep flags have {keep.shape[0]} entries, graph has {graph.n_edges} edges")
    keep = keep | graph.is_self_loop
    kept_ids = np.flatnonzero(keep)
    src = graph.edge_src[kept_ids]
    counts = np.bincount(src, minlength=graph.n_nodes)
    row_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    col_idx = graph.col_idx[kept_ids].copy()
    self_ids = np.flatnonzero(src == col_idx)
    pruned = Graph(graph.n_nodes, row_ptr, col_idx, self_ids, graph.features, graph.labels,
                   graph.train_mask, graph.val_mask, graph.test_mask)
    report = PruneReport(
        removed_edges=graph.n_edges - kept_ids.shape[0],
        candidate_edges=graph.n_non_self_edges,
        kept_edge_ids=kept_ids,
    )
    return pruned, report


def apply_mask_threshold(graph: Graph, mask: EdgeMask) -> tuple[Graph, PruneReport]:
    """Drop every edge whose mask value is exactly 0 (self-loops are kept)."""
    values = np.asarray(mask.values).reshape(-1)
    if values.shape[0] != graph.n_edges:
        raise ShapeError(f"mask has {values.shape[0]} entries, graph has {graph.n_edges} edges")
    return subgraph_keep(graph, values > 0)


def homophily_report(graph: Graph) -> tuple[float, int]:
    """Return ``(H(G), number of isolated nodes)``.

    Self-loops are not neighbours. A node with no other neighbour contributes
    1.0 to the average.
    """
    if np.any(graph.labels < 0):
        raise InputError("homophily needs every node labelled")
    src, dst = graph.edge_src, graph.col_idx
    real = src != dst
    same = (graph.labels[src] == graph.labels[dst]) & real
    n_nb = np.bincount(src[real], minlength=graph.n_nodes)
    n_same = np.bincount(src[same], minlength=graph.n_nodes)
    isolated = n_nb == 0
    ratio = np.ones(graph.n_nodes)
    ratio[~isolated] = n_same[~isolated] / n_nb[~isolated]
    return float(ratio.mean()), int(isolated.sum())


def homophily(graph: Graph) -> float:
    return homophily_report(graph)[0]


def degree_stats(graph: Graph) -> tuple[float, int]:
    """Mean neighbours per node (self-loops excluded) and total stored edges."""
    return graph.n_non_self_edges / graph.n_nodes, graph.n_edges
