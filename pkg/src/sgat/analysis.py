"""Diagnostics: edge-removal strategies, attention variance, lambda and head sweeps.

Every table writer emits a fixed header (see the ``*_FIELDS`` constants) so the
CSV files can be fed straight into a plotting tool.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor
from .errors import InputError
from .graph import Graph, PruneReport, subgraph_keep
from .models import GatModel, SgatModel, prune_by_attention
from .training import TrainConfig, accuracy_from_logits, build_model, fit, train

STRATEGIES = ("top-desc", "bottom-desc", "random")
SCHEDULES = ("from-start", "after-convergence")
DEFAULT_BIN_WIDTH = 0.002


# -- edge removal by learned log-alpha ----------------------------------------------------


def removal_order(log_alpha: np.ndarray, strategy: str, rng: np.random.Generator) -> np.ndarray:
    """Positions of non-self-loop edges in removal order. Ties go to the lower id."""
    la = np.asarray(log_alpha, dtype=np.float64).ravel()
    ids = np.arange(la.shape[0])
    if strategy == "top-desc":
        return np.lexsort((ids, -la))
    if strategy == "bottom-desc":
        return np.lexsort((ids, la))
    if strategy == "random":
        return rng.permutation(la.shape[0])
    raise InputError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def remove_edges(graph: Graph, order: np.ndarray, fraction: float) -> tuple[Graph, np.ndarray, PruneReport]:
    """Drop the first ``floor(fraction * E)`` non-self-loop edges of ``order``.

    Returns the subgraph, the boolean keep mask over the original non-self-loop
    edges, and the prune report.
    """
    if not 0.0 <= fraction < 1.0:
        raise InputError(f"removal fraction must be in [0, 1), got {fraction}")
    ids = graph.non_self_edge_ids
    n_remove = int(math.floor(fraction * ids.shape[0]))
    keep_ns = np.ones(ids.shape[0], dtype=bool)
    keep_ns[np.asarray(order)[:n_remove]] = False
    keep = np.ones(graph.n_edges, dtype=bool)
    keep[ids] = keep_ns
    sub, report = subgraph_keep(graph, keep)
    return sub, keep_ns, report


@dataclass
class RemovalPoint:
    strategy: str
    fraction: float
    removed_edges: int
    accuracy: float


REMOVAL_FIELDS = tuple(f.name for f in fields(RemovalPoint))


def _eval_on_subgraph(model: SgatModel, sub: Graph, log_alpha: np.ndarray, keep_ns: np.ndarray,
                      mask: np.ndarray) -> float:
    if model.gate == "transductive":
        logits = model.forward(sub, training=False, log_alpha=Tensor(log_alpha[keep_ns][:, None]))
    else:
        logits = model.forward(sub, training=False)
    return accuracy_from_logits(logits.values, sub.labels, mask)


def removal_strategy_curve(model: SgatModel, graph: Graph, fractions: Sequence[float],
                           strategies: Iterable[str] = STRATEGIES, *, retrain: bool = False,
                           config: TrainConfig | None = None, seed: int = 0) -> list[RemovalPoint]:
    """Accuracy after removing edges ranked by the model's log-alpha.

    Without ``retrain`` the trained model is evaluated on each pruned graph as
    is. With it, a fresh model is trained on the pruned graph using ``config``.
    Edge rankings always come from ``model``; the random strategy draws from
    ``default_rng(seed)``.
    """
    if not isinstance(model, SgatModel) or model.gate == "open":
        raise InputError("removal curves need an SGAT model with learned log-alpha")
    if retrain and config is None:
        raise InputError("retrain needs a training config")
    for f in fractions:
        if not 0.0 <= f < 1.0:
            raise InputError(f"removal fraction must be in [0, 1), got {f}")
    la = model.compute_log_alpha(graph).values[:, 0].copy()
    rows = []
    for strategy in strategies:
        order = removal_order(la, strategy, np.random.default_rng(seed))
        for f in fractions:
            sub, keep_ns, report = remove_edges(graph, order, f)
            if retrain:
                acc = fit(sub, config).test_acc
            else:
                acc = _eval_on_subgraph(model, sub, la, keep_ns, graph.test_mask)
            rows.append(RemovalPoint(strategy, float(f), report.removed_edges, acc))
    return rows


# -- attention variance -------------------------------------------------------------------


def attention_variance(coefficients: np.ndarray) -> np.ndarray:
    """Per-edge population variance over all layer x head coefficients.

    ``coefficients`` has shape ``(layers, heads, n_edges)``.
    """
    c = np.asarray(coefficients, dtype=np.float64)
    if c.ndim != 3:
        raise InputError(f"expected (layers, heads, edges) coefficients, got shape {c.shape}")
    return c.reshape(-1, c.shape[-1]).var(axis=0)


@dataclass
class HistogramBin:
    lower: float
    upper: float
    count: int


HISTOGRAM_FIELDS = tuple(f.name for f in fields(HistogramBin))


def variance_histogram(variances: np.ndarray, bin_width: float = DEFAULT_BIN_WIDTH) -> list[HistogramBin]:
    """Fixed-width bins over ``[0, max]``; the last bin includes the maximum."""
    if bin_width <= 0:
        raise InputError(f"bin width must be > 0, got {bin_width}")
    v = np.asarray(variances, dtype=np.float64).ravel()
    n_bins = max(1, int(math.ceil(v.max() / bin_width))) if v.size else 1
    idx = np.minimum((v / bin_width).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return [HistogramBin(i * bin_width, (i + 1) * bin_width, int(c)) for i, c in enumerate(counts)]


def attention_variance_histogram(model: GatModel, graph: Graph,
                                 bin_width: float = DEFAULT_BIN_WIDTH) -> list[HistogramBin]:
    return variance_histogram(attention_variance(model.attention_coefficients(graph)), bin_width)


# -- sweeps ---------------------------------------------------------------------------------


@dataclass
class LambdaPoint:
    lam: float
    accuracy: float
    removed_pct: float
    kept_edges: int


LAMBDA_FIELDS = tuple(f.name for f in fields(LambdaPoint))


def lambda_sweep(graph: Graph, grid: Sequence[float], config: TrainConfig) -> list[LambdaPoint]:
    """One full SGAT training run per lambda; everything else from ``config``."""
    if not grid:
        raise InputError("lambda grid is empty")
    rows = []
    for lam in grid:
        r = fit(graph, config.updated(model="sgat", lam=float(lam)))
        rows.append(LambdaPoint(float(lam), r.test_acc, 100.0 * r.removed_fraction, r.kept_edges))
    return rows


@dataclass
class HeadPoint:
    heads: int
    accuracy: float
    removed_pct: float


HEAD_FIELDS = tuple(f.name for f in fields(HeadPoint))


def head_sweep(graph: Graph, grid: Sequence[int], config: TrainConfig) -> list[HeadPoint]:
    if not grid:
        raise InputError("head grid is empty")
    rows = []
    for k in grid:
        r = fit(graph, config.updated(heads=int(k)))
        rows.append(HeadPoint(int(k), r.test_acc, 100.0 * r.removed_fraction))
    return rows


# -- dense-attention top-k baseline ----------------------------------------------------------


@dataclass
class TopkResult:
    schedule: str
    accuracy: float
    graph: Graph
    report: PruneReport


def topk_prune_baseline(graph: Graph, config: TrainConfig, k_fraction: float,
                        schedules: Sequence[str] = SCHEDULES) -> tuple[TopkResult, list[TopkResult]]:
    """Prune the smallest dense-GAT attention edges, retrain, keep the best schedule.

    ``from-start`` ranks edges with the untrained GAT; ``after-convergence``
    ranks them with a GAT trained on the full graph. Either way a fresh GAT
    with the same seed is then trained on the pruned graph.
    """
    if not 0.0 <= k_fraction < 1.0:
        raise InputError(f"k_fraction must be in [0, 1), got {k_fraction}")
    cfg = config.updated(model="gat")
    results = []
    for schedule in schedules:
        if schedule not in SCHEDULES:
            raise InputError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")
        ranker = build_model(graph, cfg)
        if schedule == "after-convergence":
            train(graph, ranker, cfg)
        pruned, report = prune_by_attention(ranker, graph, k_fraction)
        acc = fit(pruned, cfg).test_acc
        results.append(TopkResult(schedule, acc, pruned, report))
    best = max(results, key=lambda r: r.accuracy)
    return best, results


# -- output -----------------------------------------------------------------------------------


def write_rows(path, header: Sequence[str], rows) -> None:
    """CSV with ``header`` followed by one line per dataclass row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in astuple(row)])
