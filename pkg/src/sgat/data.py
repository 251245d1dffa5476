"""Dataset ingestion, splits, synthetic graphs and the embedded Karate Club.

Native on-disk format (plain text, ``#`` starts a comment line):

* edges file: one ``src dst`` pair per line, 0-based node ids. Pairs are read
  as undirected and symmetrised, unless the first line is exactly
  ``# directed``, in which case each line is one directed edge ``src -> dst``
  (``src`` aggregates from ``dst``).
* features file: one whitespace-separated row of reals per node; the row count
  defines the node count.
* labels file: one integer class id per line, ``-1`` for unknown.
* split file (optional): lines ``train <ids...>``, ``val <ids...>``,
  ``test <ids...>``.

A registry file (INI syntax) maps dataset names to those paths::

    [cora]
    edges = cora/edges.txt
    features = cora/features.txt
    labels = cora/labels.txt
    split = cora/split.txt        ; optional
    split_policy = planetoid      ; fixed | planetoid | random-60-20-20
    n_classes = 7                 ; optional, validates label ids

Relative paths resolve against the registry file's directory.
"""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError
from .graph import Graph, degree_stats, from_edge_list

log = logging.getLogger(__name__)

SPLIT_POLICIES = ("fixed", "planetoid", "random-60-20-20")
DIRECTED_HEADER = "# directed"

KARATE_EDGES = [
    (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (0, 8), (0, 10), (0, 11),
    (0, 12), (0, 13), (0, 17), (0, 19), (0, 21), (0, 31), (1, 2), (1, 3), (1, 7), (1, 13),
    (1, 17), (1, 19), (1, 21), (1, 30), (2, 3), (2, 7), (2, 8), (2, 9), (2, 13), (2, 27),
    (2, 28), (2, 32), (3, 7), (3, 12), (3, 13), (4, 6), (4, 10), (5, 6), (5, 10), (5, 16),
    (6, 16), (8, 30), (8, 32), (8, 33), (9, 33), (13, 33), (14, 32), (14, 33), (15, 32),
    (15, 33), (18, 32), (18, 33), (19, 33), (20, 32), (20, 33), (22, 32), (22, 33), (23, 25),
    (23, 27), (23, 29), (23, 32), (23, 33), (24, 25), (24, 27), (24, 31), (25, 31), (26, 29),
    (26, 33), (27, 33), (28, 31), (28, 33), (29, 32), (29, 33), (30, 32), (30, 33), (31, 32),
    (31, 33), (32, 33),
]
# Faction after the split: 0 = instructor (node 0), 1 = administrator (node 33).
KARATE_LABELS = [
    0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 0,
    0, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1,
]


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    edges: Path
    features: Path
    labels: Path
    split: Optional[Path] = None
    split_policy: str = "planetoid"
    n_classes: Optional[int] = None
    row_normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.split_policy not in SPLIT_POLICIES:
            raise InputError(f"split policy {self.split_policy!r} not in {SPLIT_POLICIES}")
        if self.split_policy == "fixed" and self.split is None:
            raise InputError(f"dataset {self.name}: fixed split policy needs a split file")


@dataclass(frozen=True)
class LoadReport:
    name: str
    n_nodes: int
    n_features: int
    n_classes: int
    raw_edge_lines: int
    directed_edges: int
    self_loops_added: int
    duplicates_removed: int
    mean_neighbors: float
    row_normalized: bool

    def describe(self) -> str:
        return (f"{self.name}: {self.n_nodes} nodes, {self.n_features} features, "
                f"{self.n_classes} classes, {self.raw_edge_lines} edge lines -> "
                f"{self.directed_edges} directed edges incl. self-loops "
                f"({self.self_loops_added} self-loops added, {self.duplicates_removed} duplicates "
                f"dropped), {self.mean_neighbors:.2f} neighbours/node"
                + (", features row-normalised" if self.row_normalized else ""))


# -- text formats ----------------------------------------------------------------------------


def _data_lines(path: Path):
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                stripped = line.strip()
                if stripped and not stripped.startswith("#"):
                    yield lineno, stripped
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def read_edge_file(path) -> tuple[list[tuple[int, int]], bool]:
    """Return ``(pairs, directed)``."""
    path = Path(path)
    try:
        with open(path) as fh:
            directed = fh.readline().strip() == DIRECTED_HEADER
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    pairs = []
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise InputError(f"{path}:{lineno}: expected 'src dst', got {line!r}") from None
    return pairs, directed


def write_edge_file(path, pairs, directed: bool = True) -> None:
    with open(path, "w") as fh:
        if directed:
            fh.write(DIRECTED_HEADER + "\n")
        for s, d in pairs:
            fh.write(f"{int(s)} {int(d)}\n")


def read_features(path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in _data_lines(Path(path)):
        try:
            row = [float(v) for v in line.split()]
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric feature value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise InputError(f"{path}:{lineno}: {len(row)} values, expected {width}")
        rows.append(row)
    if not rows:
        raise InputError(f"{path}: no feature rows")
    return np.array(rows, dtype=np.float64)


def write_features(path, features: np.ndarray) -> None:
    np.savetxt(path, features, fmt="%.17g")


def read_labels(path) -> np.ndarray:
    labels = []
    for lineno, line in _data_lines(Path(path)):
        try:
            labels.append(int(line))
        except ValueError:
            raise InputError(f"{path}:{lineno}: expected an integer label, got {line!r}") from None
    return np.array(labels, dtype=np.int64)


def write_labels(path, labels) -> None:
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def read_split(path, n_nodes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    masks = {k: np.zeros(n_nodes, dtype=bool) for k in ("train", "val", "test")}
    for lineno, line in _data_lines(Path(path)):
        key, *ids = line.split()
        if key not in masks:
            raise InputError(f"{path}:{lineno}: unknown split name {key!r}")
        try:
            idx = np.array([int(i) for i in ids], dtype=np.int64)
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-integer node id") from None
        if idx.size and (idx.min() < 0 or idx.max() >= n_nodes):
            raise InputError(f"{path}:{lineno}: node id outside [0, {n_nodes})")
        masks[key][idx] = True
    return masks["train"], masks["val"], masks["test"]


def write_split(path, graph: Graph) -> None:
    with open(path, "w") as fh:
        for key, mask in (("train", graph.train_mask), ("val", graph.val_mask), ("test", graph.test_mask)):
            fh.write(key + " " + " ".join(str(i) for i in np.flatnonzero(mask)) + "\n")


def save_dataset(graph: Graph, directory, name: str = "dataset") -> Path:
    """Write ``graph`` in the native format plus a one-entry registry file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = graph.edges()[~graph.is_self_loop]
    write_edge_file(directory / "edges.txt", pairs, directed=True)
    write_features(directory / "features.txt", graph.features)
    write_labels(directory / "labels.txt", graph.labels)
    write_split(directory / "split.txt", graph)
    reg = configparser.ConfigParser()
    reg[name] = {"edges": "edges.txt", "features": "features.txt", "labels": "labels.txt",
                 "split": "split.txt", "split_policy": "fixed", "row_normalize": "false"}
    with open(directory / "datasets.ini", "w") as fh:
        reg.write(fh)
    return directory / "datasets.ini"


# -- splits ----------------------------------------------------------------------------------


def planetoid_split(labels: np.ndarray, rng: np.random.Generator, per_class: int = 20,
                    n_val: int = 500, n_test: int = 1000):
    """``per_class`` training nodes per class, then ``n_val`` / ``n_test`` from the rest."""
    n = labels.shape[0]
    train = np.zeros(n, dtype=bool)
    for c in np.unique(labels[labels >= 0]):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train[idx[:per_class]] = True
    rest = rng.permutation(np.flatnonzero(~train & (labels >= 0)))
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:n_val]] = True
    test[rest[n_val:n_val + n_test]] = True
    return train, val, test


def random_class_split(labels: np.ndarray, rng: np.random.Generator,
                       fractions=(0.6, 0.2, 0.2)):
    """Split every class independently into train/val/test by ``fractions``."""
    if sum(fractions) > 1.0 + 1e-12:
        raise InputError(f"split fractions sum to more than 1: {fractions}")
    n = labels.shape[0]
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    for c in np.unique(labels[labels >= 0]):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(round(fractions[0] * idx.size))
        n_va = int(round(fractions[1] * idx.size))
        n_te = min(int(round(fractions[2] * idx.size)), idx.size - n_tr - n_va)
        masks[0][idx[:n_tr]] = True
        masks[1][idx[n_tr:n_tr + n_va]] = True
        masks[2][idx[n_tr + n_va:n_tr + n_va + n_te]] = True
    return tuple(masks)


# -- loaders ---------------------------------------------------------------------------------


def load_dataset(spec: DatasetSpec, split_seed: int | None = None) -> tuple[Graph, LoadReport]:
    features = read_features(spec.features)
    n = features.shape[0]
    labels = read_labels(spec.labels)
    if labels.shape[0] != n:
        raise InputError(f"{spec.labels}: {labels.shape[0]} labels for {n} feature rows")
    n_classes = int(labels.max()) + 1 if labels.size else 0
    if spec.n_classes is not None:
        bad = np.flatnonzero(labels >= spec.n_classes)
        if bad.size:
            raise InputError(f"{spec.labels}:{bad[0] + 1}: label {labels[bad[0]]} >= "
                             f"class count {spec.n_classes}")
        n_classes = spec.n_classes
    if np.any(labels < -1):
        raise InputError(f"{spec.labels}: labels must be >= -1")
    pairs, directed = read_edge_file(spec.edges)
    if spec.row_normalize:
        sums = features.sum(axis=1, keepdims=True)
        features = np.divide(features, sums, out=features.copy(), where=sums != 0)
    seed = spec.seed if split_seed is None else split_seed
    rng = np.random.default_rng(seed)
    if spec.split is not None and spec.split_policy in ("fixed", "planetoid"):
        masks = read_split(spec.split, n)
    elif spec.split_policy == "planetoid":
        masks = planetoid_split(labels, rng)
    else:
        masks = random_class_split(labels, rng)
    graph = from_edge_list(n, pairs, features, labels, masks, symmetrize=not directed)
    report = LoadReport(
        name=spec.name, n_nodes=n, n_features=features.shape[1], n_classes=n_classes,
        raw_edge_lines=len(pairs), directed_edges=graph.n_edges,
        self_loops_added=graph.build_report.self_loops_added,
        duplicates_removed=graph.build_report.duplicates_removed,
        mean_neighbors=degree_stats(graph)[0], row_normalized=spec.row_normalize)
    log.info(report.describe())
    return graph, report


def karate_club() -> Graph:
    """Zachary's karate club: 34 members, 78 ties, only nodes 0 and 33 labelled for training."""
    n = 34
    train = np.zeros(n, dtype=bool)
    train[[0, 33]] = True
    return from_edge_list(n, KARATE_EDGES, np.eye(n), KARATE_LABELS,
                          (train, None, ~train), symmetrize=True)


def synth_graph(n_nodes: int, n_classes: int, homophily_target: float, mean_degree: float,
                feature_noise: float = 1.0, seed: int = 0, n_features: int = 16,
                split=(0.6, 0.2, 0.2), max_tries: int = 20) -> Graph:
    """Stochastic-block-style graph with a chosen node homophily.

    Each undirected edge joins a uniformly chosen node to a partner from its own
    class with probability ``p`` and from another class otherwise; ``p`` starts
    at the target and is nudged until the measured homophily is within 0.05.
    Every node receives at least one edge when ``mean_degree >= 2``. Features
    are a random Gaussian class centre plus isotropic noise of scale
    ``feature_noise``.
    """
    from .graph import homophily

    if not 0.0 <= homophily_target <= 1.0:
        raise InputError(f"homophily target must be in [0, 1], got {homophily_target}")
    if n_classes < 1 or n_nodes < n_classes:
        raise InputError("need at least one node per class")
    if mean_degree < 0 or mean_degree > n_nodes - 1:
        raise InputError(f"mean degree {mean_degree} infeasible for {n_nodes} nodes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_nodes) % n_classes
    labels = rng.permutation(labels)
    members = [np.flatnonzero(labels == c) for c in range(n_classes)]
    min_class = min(m.size for m in members)
    if homophily_target > 0 and min_class < 2:
        raise InputError("intra-class edges need at least two nodes per class")
    if homophily_target < 1 and n_classes < 2:
        raise InputError("inter-class edges need at least two classes")
    n_undirected = int(round(n_nodes * mean_degree / 2))
    max_intra = sum(m.size * (m.size - 1) // 2 for m in members)
    max_inter = n_nodes * (n_nodes - 1) // 2 - max_intra
    if n_undirected > (max_intra if homophily_target == 1 else max_inter if homophily_target == 0
                       else max_intra + max_inter):
        raise InputError("requested degree exceeds the available node pairs")

    others = [np.flatnonzero(labels != c) for c in range(n_classes)]

    def build(p_intra):
        edges: set[tuple[int, int]] = set()
        starts = list(rng.permutation(n_nodes)) if mean_degree >= 2 else []
        attempts = 0
        while len(edges) < n_undirected:
            attempts += 1
            if attempts > 50 * n_undirected + 1000:
                raise InputError("could not place the requested number of edges")
            from_start = bool(starts)
            u = int(starts.pop()) if from_start else int(rng.integers(n_nodes))
            pool = members[labels[u]] if rng.random() < p_intra else others[labels[u]]
            v = int(pool[rng.integers(pool.size)])
            if u == v or (min(u, v), max(u, v)) in edges:
                if from_start:
                    starts.append(u)
                continue
            edges.add((min(u, v), max(u, v)))
        return sorted(edges)

    p = homophily_target
    for _ in range(max_tries):
        edges = build(p)
        graph = from_edge_list(n_nodes, edges, None, labels, symmetrize=True)
        measured = homophily(graph)
        if abs(measured - homophily_target) <= 0.05:
            break
        p = float(np.clip(p + (homophily_target - measured), 0.0, 1.0))
    else:
        raise InputError(f"could not reach homophily {homophily_target} (last {measured:.3f})")

    centres = rng.normal(size=(n_classes, n_features))
    features = centres[labels] + feature_noise * rng.normal(size=(n_nodes, n_features))
    masks = random_class_split(labels, rng, split)
    return from_edge_list(n_nodes, edges, features, labels, masks, symmetrize=True)


# -- registry --------------------------------------------------------------------------------

BUILTIN_DATASETS = {
    "karate": "Zachary karate club, 34 nodes, 2 labelled",
    "synth-assort": "synthetic assortative graph: 1000 nodes, H~0.8, mean degree 15",
    "synth-dis": "synthetic disassortative graph: 300 nodes, H~0.1, mean degree 4",
}


def data_dir() -> Path:
    return Path(os.environ.get("SGAT_DATA_DIR", "data"))


def read_registry(path) -> dict[str, DatasetSpec]:
    path = Path(path)
    if not path.exists():
        return {}
    parser = configparser.ConfigParser(inline_comment_prefixes=(";",))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise InputError(f"{path}: {exc}") from exc
    base = path.parent
    specs = {}
    for name in parser.sections():
        sec = parser[name]
        try:
            specs[name] = DatasetSpec(
                name=name,
                edges=base / sec["edges"],
                features=base / sec["features"],
                labels=base / sec["labels"],
                split=base / sec["split"] if sec.get("split") else None,
                split_policy=sec.get("split_policy", "planetoid"),
                n_classes=sec.getint("n_classes") if sec.get("n_classes") else None,
                row_normalize=sec.getboolean("row_normalize", True),
                seed=sec.getint("seed", 0),
            )
        except KeyError as exc:
            raise InputError(f"{path}: dataset [{name}] lacks key {exc}") from None
    return specs


def available_datasets(registry_path=None) -> dict[str, str]:
    out = dict(BUILTIN_DATASETS)
    reg = Path(registry_path) if registry_path else data_dir() / "datasets.ini"
    for name, spec in read_registry(reg).items():
        out[name] = f"{spec.edges} ({spec.split_policy} split)"
    return out


def resolve_dataset(name: str, registry_path=None, seed: int = 0) -> Graph:
    """Graph for a built-in or registry dataset name; ``seed`` drives random splits."""
    if name == "karate":
        return karate_club()
    if name == "synth-assort":
        return synth_graph(1000, 5, 0.8, 15, feature_noise=SYNTH_ASSORT_NOISE, seed=seed,
                           split=SYNTH_ASSORT_SPLIT)
    if name == "synth-dis":
        return synth_graph(300, 5, 0.1, 4, feature_noise=1.0, seed=seed)
    reg = Path(registry_path) if registry_path else data_dir() / "datasets.ini"
    specs = read_registry(reg)
    if name not in specs:
        raise InputError(f"unknown dataset {name!r}")
    spec = specs[name]
    split_seed = None if spec.split_policy == "fixed" else spec.seed + seed
    return load_dataset(spec, split_seed=split_seed)[0]


SYNTH_ASSORT_NOISE = 2.0
SYNTH_ASSORT_SPLIT = (0.6, 0.2, 0.2)
