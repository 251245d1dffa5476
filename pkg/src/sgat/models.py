"""SGAT, GCN and dense GAT node classifiers built on :mod:`sgat.autograd`.

All models share one calling convention::

    logits = model.forward(graph, training=True, rng=rng)

and expose ``parameters()`` (everything Adam updates) and
``weight_parameters()`` (everything the L2 term penalises).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, InputError, ShapeError, StructuralError
from .graph import Graph, PruneReport, subgraph_keep
from .hard_concrete import (
    DEFAULT_PARAMS,
    HardConcreteParams,
    deterministic_mask,
    draw_uniform,
    init_log_alpha,
    sample_gate,
)

CHECKPOINT_VERSION = 1
GATE_MODES = ("transductive", "inductive", "open")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def sparse_attention(graph: Graph, gate_values: Tensor) -> Tensor:
    """Row-normalise per-edge gates: ``a_e = z_e / sum of z over the row of e``."""
    if gate_values.shape != (graph.n_edges, 1):
        raise ShapeError(f"gate values {gate_values.shape}, expected ({graph.n_edges}, 1)")
    src = graph.edge_src
    denom = ag.scatter_add_rows(gate_values, src, graph.n_nodes)
    return ag.div(gate_values, ag.gather_rows(denom, src))


def assemble_gates(graph: Graph, non_self: Tensor) -> Tensor:
    """Place non-self-loop gates at their edge slots; self-loops are constant 1."""
    ones = Tensor(graph.is_self_loop.astype(np.float64))
    return ag.add(ag.scatter_add_rows(non_self, graph.non_self_edge_ids, graph.n_edges), ones)


@dataclass
class InductiveGenerator:
    """Per-edge log-alpha from the concatenated projections of both endpoints.

    ``projection`` is the very same Tensor object as the first head's weight in
    the first layer, so gradients from both uses accumulate in one buffer.
    """

    projection: Tensor
    b: Tensor

    def log_alpha(self, graph: Graph, x: Tensor) -> Tensor:
        return generate_log_alpha(self, graph, x)


def generate_log_alpha(gen: InductiveGenerator, graph: Graph, x: Tensor) -> Tensor:
    if x.cols != gen.projection.rows:
        raise ShapeError(f"features {x.shape} do not match projection {gen.projection.shape}")
    ids = graph.non_self_edge_ids
    p = ag.matmul(x, gen.projection)
    pair = ag.concat_cols([ag.gather_rows(p, graph.edge_src[ids]),
                           ag.gather_rows(p, graph.col_idx[ids])])
    return ag.matmul(pair, gen.b)


@dataclass
class ForwardTrace:
    log_alpha: Optional[Tensor] = None
    gates: Optional[Tensor] = None
    attention: Optional[Tensor] = None
    consumed: list = field(default_factory=list)


class SgatModel:
    """Multi-head SGAT: one gated attention vector shared by every layer and head.

    Hidden layers concatenate ReLU head outputs; the output layer averages its
    heads and stays linear (softmax lives in the loss).
    """

    kind = "sgat"

    def __init__(self, in_dim: int, n_classes: int, n_non_self_edges: int = 0, *,
                 hidden: int = 8, heads: int = 2, layers: int = 2, gate: str = "transductive",
                 hc: HardConcreteParams = DEFAULT_PARAMS, dropout_input: float = 0.0,
                 dropout_attn: float = 0.0, log_alpha_mean: float = 2.0,
                 rng: np.random.Generator | None = None):
        if gate not in GATE_MODES:
            raise ConfigError(f"gate must be one of {GATE_MODES}, got {gate!r}")
        if layers < 1 or heads < 1 or hidden < 1:
            raise ConfigError("layers, heads and hidden must all be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.n_classes = in_dim, n_classes
        self.hidden, self.heads, self.layers = hidden, heads, layers
        self.gate, self.hc = gate, hc
        self.dropout_input, self.dropout_attn = dropout_input, dropout_attn
        self.n_non_self_edges = n_non_self_edges
        self.weights: list[list[Tensor]] = []
        d_in = in_dim
        for layer in range(layers):
            d_out = n_classes if layer == layers - 1 else hidden
            self.weights.append([glorot(rng, d_in, d_out, f"W{layer}_{k}") for k in range(heads)])
            d_in = heads * d_out
        self.log_alpha: Optional[Tensor] = None
        self.generator: Optional[InductiveGenerator] = None
        if gate == "transductive":
            self.log_alpha = Tensor(init_log_alpha(n_non_self_edges, rng, mean=log_alpha_mean),
                                    requires_grad=True, name="log_alpha")
        elif gate == "inductive":
            proj = self.weights[0][0]
            self.generator = InductiveGenerator(proj, glorot(rng, 2 * proj.cols, 1, "b"))
        self.trace = ForwardTrace()

    def parameters(self) -> list[Tensor]:
        params = [w for layer in self.weights for w in layer]
        if self.log_alpha is not None:
            params.append(self.log_alpha)
        if self.generator is not None:
            params.append(self.generator.b)
        return params

    def weight_parameters(self) -> list[Tensor]:
        params = [w for layer in self.weights for w in layer]
        if self.generator is not None:
            params.append(self.generator.b)
        return params

    def compute_log_alpha(self, graph: Graph, x: Tensor | None = None) -> Optional[Tensor]:
        if self.gate == "transductive":
            if self.log_alpha.rows != graph.n_non_self_edges:
                raise StructuralError(
                    f"model holds {self.log_alpha.rows} edge gates, graph has "
                    f"{graph.n_non_self_edges} non-self-loop edges")
            return self.log_alpha
        if self.gate == "inductive":
            return generate_log_alpha(self.generator, graph, x if x is not None else Tensor(graph.features))
        return None

    def edge_mask(self, graph: Graph, log_alpha=None) -> np.ndarray:
        """Deterministic per-edge gate values (self-loops = 1) for ``graph``."""
        if log_alpha is None:
            log_alpha = self.compute_log_alpha(graph)
        mask = np.ones(graph.n_edges)
        if log_alpha is not None:
            mask[graph.non_self_edge_ids] = deterministic_mask(log_alpha)[:, 0]
        return mask

    def forward(self, graph: Graph, x: Tensor | None = None, *, training: bool = False,
                rng: np.random.Generator | None = None, log_alpha: Tensor | None = None,
                noise: np.ndarray | None = None) -> Tensor:
        x = x if x is not None else Tensor(graph.features)
        if x.cols != self.in_dim or x.rows != graph.n_nodes:
            raise ConfigError(f"features {x.shape} do not fit model input dim {self.in_dim} "
                              f"on a {graph.n_nodes}-node graph")
        if training and rng is None and (noise is None or self.dropout_input or self.dropout_attn):
            raise ConfigError("training forward needs an rng")
        la = log_alpha if log_alpha is not None else self.compute_log_alpha(graph, x)
        if la is None:
            z_ns = Tensor(np.ones((graph.n_non_self_edges, 1)))
        elif training:
            u = noise if noise is not None else draw_uniform(rng, la.rows)
            z_ns = sample_gate(la, u, self.hc)
        else:
            z_ns = Tensor(deterministic_mask(la, self.hc))
        gates = assemble_gates(graph, z_ns)
        attn = sparse_attention(graph, gates)
        attn = ag.dropout(attn, self.dropout_attn, training, rng)
        trace = ForwardTrace(log_alpha=la, gates=gates, attention=attn)
        h = x
        for layer, heads in enumerate(self.weights):
            h = ag.dropout(h, self.dropout_input, training, rng)
            outs = []
            for w in heads:
                trace.consumed.append(attn)
                outs.append(ag.spmm_aggregate(graph, attn, ag.matmul(h, w)))
            if layer == self.layers - 1:
                h = outs[0]
                for o in outs[1:]:
                    h = ag.add(h, o)
                h = h * (1.0 / len(outs)) if len(outs) > 1 else h
            else:
                h = ag.concat_cols([ag.relu(o) for o in outs])
        self.trace = trace
        return h

    def hyperparams(self) -> dict:
        return dict(in_dim=self.in_dim, n_classes=self.n_classes,
                    n_non_self_edges=self.n_non_self_edges, hidden=self.hidden, heads=self.heads,
                    layers=self.layers, gate=self.gate, hc=asdict(self.hc),
                    dropout_input=self.dropout_input, dropout_attn=self.dropout_attn)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"W{l}_{k}": w.values for l, hs in enumerate(self.weights) for k, w in enumerate(hs)}
        if self.log_alpha is not None:
            out["log_alpha"] = self.log_alpha.values
        if self.generator is not None:
            out["b"] = self.generator.b.values
        return out

    @classmethod
    def from_hyperparams(cls, hp: dict) -> "SgatModel":
        hp = dict(hp)
        hc = HardConcreteParams(**hp.pop("hc"))
        in_dim, n_classes = hp.pop("in_dim"), hp.pop("n_classes")
        return cls(in_dim, n_classes, hc=hc, **hp)


def normalized_adjacency(graph: Graph) -> np.ndarray:
    """Per-edge weights of ``D^-1/2 (A + I) D^-1/2`` in CSR order."""
    deg = np.diff(graph.row_ptr).astype(np.float64)
    inv = 1.0 / np.sqrt(deg)
    return (inv[graph.edge_src] * inv[graph.col_idx])[:, None]


class GcnModel:
    kind = "gcn"

    def __init__(self, in_dim: int, n_classes: int, *, hidden: int = 16, layers: int = 2,
                 dropout_input: float = 0.5, rng: np.random.Generator | None = None, **_):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.n_classes, self.hidden, self.layers = in_dim, n_classes, hidden, layers
        self.dropout_input = dropout_input
        dims = [in_dim] + [hidden] * (layers - 1) + [n_classes]
        self.weights = [glorot(rng, dims[i], dims[i + 1], f"W{i}") for i in range(layers)]
        self._adj_cache: tuple[int, Tensor] | None = None
        self.trace = ForwardTrace()

    def parameters(self) -> list[Tensor]:
        return list(self.weights)

    weight_parameters = parameters

    def _adjacency(self, graph: Graph) -> Tensor:
        if self._adj_cache is None or self._adj_cache[0] != id(graph):
            self._adj_cache = (id(graph), Tensor(normalized_adjacency(graph)))
        return self._adj_cache[1]

    def forward(self, graph: Graph, x: Tensor | None = None, *, training: bool = False,
                rng: np.random.Generator | None = None, **_) -> Tensor:
        x = x if x is not None else Tensor(graph.features)
        adj = self._adjacency(graph)
        h = x
        for layer, w in enumerate(self.weights):
            h = ag.dropout(h, self.dropout_input, training, rng)
            h = ag.spmm_aggregate(graph, adj, ag.matmul(h, w))
            if layer < self.layers - 1:
                h = ag.relu(h)
        return h

    def hyperparams(self) -> dict:
        return dict(in_dim=self.in_dim, n_classes=self.n_classes, hidden=self.hidden,
                    layers=self.layers, dropout_input=self.dropout_input)

    def state(self) -> dict[str, np.ndarray]:
        return {f"W{i}": w.values for i, w in enumerate(self.weights)}

    @classmethod
    def from_hyperparams(cls, hp: dict) -> "GcnModel":
        hp = dict(hp)
        return cls(hp.pop("in_dim"), hp.pop("n_classes"), **hp)


def edge_softmax(graph: Graph, scores: Tensor) -> Tensor:
    """Softmax of per-edge scores over the edges of each row."""
    src = graph.edge_src
    row_max = np.full(graph.n_nodes, -np.inf)
    np.maximum.at(row_max, src, scores.values[:, 0])
    # Shift is a constant per row: softmax is invariant to it.
    e = ag.exp(ag.sub(scores, Tensor(row_max[src][:, None])))
    denom = ag.scatter_add_rows(e, src, graph.n_nodes)
    return ag.div(e, ag.gather_rows(denom, src))


class GatModel:
    """Dense multi-head GAT with independent attention per layer and head."""

    kind = "gat"

    def __init__(self, in_dim: int, n_classes: int, *, hidden: int = 8, heads: int = 2,
                 layers: int = 2, dropout_input: float = 0.0, dropout_attn: float = 0.0,
                 negative_slope: float = 0.2, rng: np.random.Generator | None = None, **_):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.n_classes = in_dim, n_classes
        self.hidden, self.heads, self.layers = hidden, heads, layers
        self.dropout_input, self.dropout_attn = dropout_input, dropout_attn
        self.negative_slope = negative_slope
        self.weights: list[list[Tensor]] = []
        self.attn_self: list[list[Tensor]] = []
        self.attn_nbr: list[list[Tensor]] = []
        d_in = in_dim
        for layer in range(layers):
            d_out = n_classes if layer == layers - 1 else hidden
            self.weights.append([glorot(rng, d_in, d_out, f"W{layer}_{k}") for k in range(heads)])
            self.attn_self.append([glorot(rng, d_out, 1, f"as{layer}_{k}") for k in range(heads)])
            self.attn_nbr.append([glorot(rng, d_out, 1, f"an{layer}_{k}") for k in range(heads)])
            d_in = heads * d_out
        self.coefficients: list[list[np.ndarray]] = []
        self.trace = ForwardTrace()

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in range(self.layers):
            out += self.weights[layer] + self.attn_self[layer] + self.attn_nbr[layer]
        return out

    weight_parameters = parameters

    def forward(self, graph: Graph, x: Tensor | None = None, *, training: bool = False,
                rng: np.random.Generator | None = None, **_) -> Tensor:
        x = x if x is not None else Tensor(graph.features)
        src, dst = graph.edge_src, graph.col_idx
        coeffs: list[list[np.ndarray]] = []
        h = x
        for layer in range(self.layers):
            h = ag.dropout(h, self.dropout_input, training, rng)
            outs, layer_coeffs = [], []
            for k in range(self.heads):
                wh = ag.matmul(h, self.weights[layer][k])
                score = ag.add(ag.gather_rows(ag.matmul(wh, self.attn_self[layer][k]), src),
                               ag.gather_rows(ag.matmul(wh, self.attn_nbr[layer][k]), dst))
                attn = edge_softmax(graph, ag.leaky_relu(score, self.negative_slope))
                layer_coeffs.append(attn.values[:, 0].copy())
                attn = ag.dropout(attn, self.dropout_attn, training, rng)
                outs.append(ag.spmm_aggregate(graph, attn, wh))
            coeffs.append(layer_coeffs)
            if layer == self.layers - 1:
                h = outs[0]
                for o in outs[1:]:
                    h = ag.add(h, o)
                h = h * (1.0 / len(outs)) if len(outs) > 1 else h
            else:
                h = ag.concat_cols([ag.relu(o) for o in outs])
        self.coefficients = coeffs
        return h

    def attention_coefficients(self, graph: Graph) -> np.ndarray:
        """Eval-mode coefficients, shape ``(layers, heads, n_edges)``."""
        self.forward(graph, training=False)
        return np.array(self.coefficients)

    def hyperparams(self) -> dict:
        return dict(in_dim=self.in_dim, n_classes=self.n_classes, hidden=self.hidden,
                    heads=self.heads, layers=self.layers, dropout_input=self.dropout_input,
                    dropout_attn=self.dropout_attn, negative_slope=self.negative_slope)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for l in range(self.layers):
            for k in range(self.heads):
                out[f"W{l}_{k}"] = self.weights[l][k].values
                out[f"as{l}_{k}"] = self.attn_self[l][k].values
                out[f"an{l}_{k}"] = self.attn_nbr[l][k].values
        return out

    @classmethod
    def from_hyperparams(cls, hp: dict) -> "GatModel":
        hp = dict(hp)
        return cls(hp.pop("in_dim"), hp.pop("n_classes"), **hp)


def prune_by_attention(model: GatModel, graph: Graph, k_fraction: float) -> tuple[Graph, PruneReport]:
    """Remove the ``k_fraction`` of non-self-loop edges with the smallest layer-0 attention.

    The score of an edge is its first-layer coefficient averaged over heads.
    Ties are broken by ascending edge id.
    """
    if not 0.0 <= k_fraction < 1.0:
        raise InputError(f"k_fraction must be in [0, 1), got {k_fraction}")
    score = model.attention_coefficients(graph)[0].mean(axis=0)
    ids = graph.non_self_edge_ids
    n_remove = int(np.floor(k_fraction * ids.shape[0]))
    order = np.lexsort((ids, score[ids]))
    keep = np.ones(graph.n_edges, dtype=bool)
    keep[ids[order[:n_remove]]] = False
    return subgraph_keep(graph, keep)


MODEL_TYPES = {cls.kind: cls for cls in (SgatModel, GcnModel, GatModel)}


def load_state(model, state: dict[str, np.ndarray]) -> None:
    """Copy arrays into the model's parameters in place (shapes must match)."""
    current = model.state()
    if set(current) != set(state):
        raise StructuralError(f"parameter names differ: {sorted(current)} vs {sorted(state)}")
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != current[name].shape:
            raise StructuralError(f"{name}: shape {arr.shape}, model expects {current[name].shape}")
        current[name][...] = arr


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    payload = {
        "format": "sgat-checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "hyperparams": model.hyperparams(),
        "params": {name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                   for name, arr in model.state().items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    """Return ``(model, extra)`` from a file written by :func:`save_checkpoint`."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != "sgat-checkpoint" or payload.get("version") != CHECKPOINT_VERSION:
        raise StructuralError(f"{path} is not a version-{CHECKPOINT_VERSION} sgat checkpoint")
    cls = MODEL_TYPES[payload["kind"]]
    model = cls.from_hyperparams(payload["hyperparams"])
    state = {name: np.array(p["values"], dtype=np.float64).reshape(p["shape"])
             for name, p in payload["params"].items()}
    load_state(model, state)
    return model, payload.get("extra", {})
