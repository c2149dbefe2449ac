"""Graph topology, mini-batches, line graphs, SBM data and dataset files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

from .autodiff import Segments, Tensor, constant

__all__ = [
    "GraphError",
    "DatasetError",
    "GraphTopology",
    "Neighborhood",
    "Graph",
    "GraphBatch",
    "GraphDataset",
    "SbmConfig",
    "TASKS",
    "build_topology",
    "batch_concat",
    "line_graph",
    "sbm_generate",
    "dataset_write",
    "dataset_read",
    "split_paths",
]

FORMAT_NAME = "graphnorm.graphs"
FORMAT_VERSION = 1
TASKS = ("node", "graph-class", "graph-reg", "link")


class GraphError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Flattened neighbor lists: row ``index[k]`` belongs to node ``segments.ids[k]``."""

    index: np.ndarray
    segments: Segments

    @property
    def counts(self) -> np.ndarray:
        return self.segments.counts


@dataclass(frozen=True, eq=False)
class GraphTopology:
    """CSR adjacency.  Self loops are never stored."""

    num_nodes: int
    offsets: np.ndarray
    indices: np.ndarray
    undirected: bool = True

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def num_entries(self) -> int:
        return int(self.indices.size)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.offsets[v]:self.offsets[v + 1]]

    @cached_property
    def owners(self) -> np.ndarray:
        """Row owner of every CSR entry (sorted)."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(source, target) per CSR entry, target being the row owner."""
        return self.indices.copy(), self.owners.copy()

    def undirected_edges(self) -> np.ndarray:
        """Unique (u, v) pairs with u < v, in CSR order."""
        src, dst = self.indices, self.owners
        keep = dst < src
        return np.stack([dst[keep], src[keep]], axis=1)

    def edge_list(self) -> np.ndarray:
        if self.undirected:
            return self.undirected_edges()
        return np.stack([self.owners, self.indices], axis=1)

    @cached_property
    def _scopes(self) -> dict:
        return {}

    def scope(self, self_inclusive: bool = True) -> Neighborhood:
        """Neighborhood lists sorted by node id, optionally including the node itself."""
        key = bool(self_inclusive)
        if key not in self._scopes:
            if self_inclusive:
                own = np.arange(self.num_nodes)
                owner = np.concatenate([self.owners, own])
                member = np.concatenate([self.indices, own])
                order = np.lexsort((member, owner))
                owner, member = owner[order], member[order]
            else:
                owner, member = self.owners, self.indices
            self._scopes[key] = Neighborhood(member, Segments(owner, self.num_nodes))
        return self._scopes[key]


def build_topology(num_nodes: int, edges, undirected: bool = True) -> GraphTopology:
    """CSR topology from an edge list; duplicates are dropped.

    For directed graphs an edge ``(u, v)`` is stored in row ``u``.
    """
    num_nodes = int(num_nodes)
    if num_nodes < 0:
        raise GraphError("num_nodes must be non-negative")
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.size:
        if e.min() < 0 or e.max() >= num_nodes:
            bad = e[(e < 0).any(axis=1) | (e >= num_nodes).any(axis=1)][0]
            raise GraphError(f"edge {tuple(int(x) for x in bad)} out of range for {num_nodes} nodes")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphError("self-loop entries are not stored in the topology")
    if undirected:
        e = np.concatenate([e, e[:, ::-1]], axis=0)
    keys = np.unique(e[:, 0] * max(num_nodes, 1) + e[:, 1])
    rows = keys // max(num_nodes, 1)
    cols = keys % max(num_nodes, 1)
    offsets = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=num_nodes))]).astype(np.int64)
    return GraphTopology(num_nodes, offsets, cols.astype(np.int64), undirected)


def line_graph(topology: GraphTopology, edge_endpoints) -> GraphTopology:
    """Topology over edges; two edges are adjacent when they share an endpoint."""
    ends = np.asarray(edge_endpoints, dtype=np.int64).reshape(-1, 2)
    m = ends.shape[0]
    if ends.size and (ends.min() < 0 or ends.max() >= topology.num_nodes):
        raise GraphError("edge endpoint out of range")
    node = np.concatenate([ends[:, 0], ends[:, 1]])
    edge = np.concatenate([np.arange(m), np.arange(m)])
    order = np.lexsort((edge, node))
    node, edge = node[order], edge[order]
    bounds = np.flatnonzero(np.diff(node)) + 1
    pairs = []
    for group in np.split(edge, bounds):
        group = np.unique(group)
        if group.size < 2:
            continue
        a, b = np.triu_indices(group.size, k=1)
        pairs.append(np.stack([group[a], group[b]], axis=1))
    pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
    return build_topology(m, pairs, undirected=True)


@dataclass(eq=False)
class Graph:
    """One sample.

    ``edge_features`` and ``edge_labels`` follow different orders: edge
    features have one row per directed CSR entry, edge labels one entry per
    undirected edge in ``topology.undirected_edges()`` order.
    """

    topology: GraphTopology
    features: np.ndarray
    node_labels: np.ndarray | None = None
    graph_label: float | None = None
    edge_features: np.ndarray | None = None
    edge_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.topology.num_nodes:
            raise GraphError(
                f"features must be {self.topology.num_nodes} x d, got {self.features.shape}")
        if self.edge_features is not None:
            self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
            if self.edge_features.shape[0] != self.topology.num_entries:
                raise GraphError("edge_features needs one row per directed edge")

    @property
    def num_nodes(self) -> int:
        return self.topology.num_nodes


@dataclass(eq=False)
class GraphBatch:
    """Several graphs glued into one block-diagonal graph."""

    graphs: list[Graph]
    topology: GraphTopology
    segment: Segments
    node_offsets: np.ndarray
    H: Tensor
    E: Tensor | None
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_segment: Segments
    node_labels: np.ndarray | None = None
    graph_labels: np.ndarray | None = None
    pair_src: np.ndarray | None = None
    pair_dst: np.ndarray | None = None
    pair_labels: np.ndarray | None = None
    _line: GraphTopology | None = field(default=None, repr=False)

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return self.topology.num_nodes

    @property
    def num_edges(self) -> int:
        return self.topology.num_entries

    def graph_sizes(self) -> np.ndarray:
        return self.segment.counts

    @property
    def edge_endpoints(self) -> np.ndarray:
        return np.stack([self.edge_src, self.edge_dst], axis=1)

    @property
    def line_topology(self) -> GraphTopology:
        if self._line is None:
            self._line = line_graph(self.topology, self.edge_endpoints)
        return self._line


def batch_concat(graphs: Sequence[Graph]) -> GraphBatch:
    graphs = list(graphs)
    if not graphs:
        raise GraphError("empty batch")
    d = graphs[0].features.shape[1]
    for k, g in enumerate(graphs):
        if g.features.shape[1] != d:
            raise GraphError(f"graph {k} has feature dimension {g.features.shape[1]}, expected {d}")
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    node_offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(node_offsets[-1])

    offsets = [np.zeros(1, dtype=np.int64)]
    indices = []
    entry_base = 0
    for g, base in zip(graphs, node_offsets[:-1]):
        offsets.append(g.topology.offsets[1:] + entry_base)
        indices.append(g.topology.indices + base)
        entry_base += g.topology.num_entries
    topo = GraphTopology(
        n,
        np.concatenate(offsets),
        np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
        all(g.topology.undirected for g in graphs),
    )
    seg_ids = np.repeat(np.arange(len(graphs)), sizes)
    segment = Segments(seg_ids, len(graphs))
    src, dst = topo.directed_edges()
    edge_segment = Segments(seg_ids[dst], len(graphs))

    E = None
    if all(g.edge_features is not None for g in graphs):
        de = graphs[0].edge_features.shape[1]
        if any(g.edge_features.shape[1] != de for g in graphs):
            raise GraphError("edge feature dimensions differ across graphs")
        E = constant(np.concatenate([g.edge_features for g in graphs], axis=0).reshape(-1, de))

    node_labels = None
    if all(g.node_labels is not None for g in graphs):
        node_labels = np.concatenate([np.asarray(g.node_labels) for g in graphs])
    graph_labels = None
    if all(g.graph_label is not None for g in graphs):
        graph_labels = np.array([g.graph_label for g in graphs])
    pair_src = pair_dst = pair_labels = None
    if all(g.edge_labels is not None for g in graphs):
        pairs = [g.topology.undirected_edges() + base for g, base in zip(graphs, node_offsets[:-1])]
        pairs = np.concatenate(pairs)
        pair_src, pair_dst = pairs[:, 0], pairs[:, 1]
        pair_labels = np.concatenate([np.asarray(g.edge_labels) for g in graphs])

    return GraphBatch(
        graphs=graphs,
        topology=topo,
        segment=segment,
        node_offsets=node_offsets,
        H=constant(np.concatenate([g.features for g in graphs], axis=0)),
        E=E,
        edge_src=src,
        edge_dst=dst,
        edge_segment=edge_segment,
        node_labels=node_labels,
        graph_labels=graph_labels,
        pair_src=pair_src,
        pair_dst=pair_dst,
        pair_labels=pair_labels,
    )


# ---------------------------------------------------------------------------
# stochastic block model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SbmConfig:
    num_graphs: int = 200
    nodes_min: int = 30
    nodes_max: int = 50
    num_clusters: int = 2
    p_intra: float = 0.5
    p_inter: float = 0.05
    seed: int = 0
    task: str = "node"
    balanced: bool = False

    def validate(self) -> None:
        if not 0 <= self.p_inter < self.p_intra <= 1:
            raise ValueError("need 0 <= p_inter < p_intra <= 1")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.nodes_min < self.num_clusters:
            raise ValueError("nodes_min must be >= num_clusters")
        if self.nodes_max < self.nodes_min:
            raise ValueError("nodes_max must be >= nodes_min")
        if self.num_graphs < 1:
            raise ValueError("num_graphs must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")


def _sbm_graph(cfg: SbmConfig, index: int) -> Graph:
    rng = np.random.default_rng([cfg.seed, index])
    C = cfg.num_clusters
    n = int(rng.integers(cfg.nodes_min, cfg.nodes_max + 1))
    if cfg.balanced:
        labels = np.arange(n) % C
    else:
        labels = np.concatenate([np.arange(C), rng.integers(0, C, n - C)])
    labels = rng.permutation(labels)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], cfg.p_intra, cfg.p_inter)
    keep = rng.random(iu.size) < prob
    topo = build_topology(n, np.stack([iu[keep], ju[keep]], axis=1), undirected=True)

    features = np.zeros((n, C))
    for c in range(C):
        members = np.flatnonzero(labels == c)
        features[members[rng.integers(members.size)], c] = 1.0

    g = Graph(topo, features)
    if cfg.task == "node":
        g.node_labels = labels
    elif cfg.task == "graph-class":
        g.graph_label = int(np.sum(labels == 0) % 2)
    elif cfg.task == "graph-reg":
        g.graph_label = float(np.bincount(labels, minlength=C).max() / n)
    else:
        pairs = topo.undirected_edges()
        g.edge_labels = (labels[pairs[:, 0]] == labels[pairs[:, 1]]).astype(np.int64)
    return g


def sbm_generate(config: SbmConfig) -> list[Graph]:
    """Sample ``config.num_graphs`` SBM graphs.

    Graph ``i`` draws from its own generator seeded with ``(seed, i)``, so
    any subset can be regenerated independently.  Node features are zero
    except for one seed node per cluster, which carries the cluster one-hot.
    """
    config.validate()
    return [_sbm_graph(config, i) for i in range(config.num_graphs)]


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GraphDataset:
    task: str
    graphs: list[Graph]
    num_classes: int | None = None

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self) -> Iterator[Graph]:
        return iter(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].features.shape[1]

    @property
    def edge_feature_dim(self) -> int | None:
        ef = self.graphs[0].edge_features
        return None if ef is None else ef.shape[1]


def _infer_classes(task: str, graphs: Sequence[Graph]) -> int | None:
    if task == "node":
        return int(max(int(np.max(g.node_labels)) for g in graphs if g.num_nodes) + 1)
    if task == "graph-class":
        return int(max(int(g.graph_label) for g in graphs) + 1)
    if task == "link":
        return 2
    return None


def _record(g: Graph, task: str) -> dict:
    rec = {
        "n": g.num_nodes,
        "undirected": g.topology.undirected,
        "edges": g.topology.edge_list().tolist(),
        "features": g.features.tolist(),
    }
    if task == "node":
        rec["labels"] = [int(x) for x in g.node_labels]
    elif task == "graph-class":
        rec["label"] = int(g.graph_label)
    elif task == "graph-reg":
        rec["target"] = float(g.graph_label)
    elif task == "link":
        rec["edge_labels"] = [int(x) for x in g.edge_labels]
    if g.edge_features is not None:
        rec["edge_features"] = g.edge_features.tolist()
    return rec


def dataset_write(path, graphs: GraphDataset | Iterable[Graph], task: str | None = None,
                  num_classes: int | None = None) -> None:
    """Write graphs as JSON lines: one header line, then one graph per line."""
    if isinstance(graphs, GraphDataset):
        task = task or graphs.task
        num_classes = num_classes if num_classes is not None else graphs.num_classes
        graphs = graphs.graphs
    graphs = list(graphs)
    if task not in TASKS:
        raise DatasetError(f"unknown task {task!r}")
    if not graphs:
        raise DatasetError("no graphs to write")
    d = graphs[0].features.shape[1]
    for k, g in enumerate(graphs):
        if g.features.shape[1] != d:
            raise DatasetError(f"record {k}: feature dimension {g.features.shape[1]} != {d}")
    ef = graphs[0].edge_features
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "task": task,
        "d": d,
        "d_edge": None if ef is None else int(ef.shape[1]),
        "num_classes": num_classes if num_classes is not None else _infer_classes(task, graphs),
        "count": len(graphs),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for g in graphs:
            fh.write(json.dumps(_record(g, task)) + "\n")
    os.replace(tmp, path)


def _parse_record(rec: dict, header: dict, index: int) -> Graph:
    where = f"record {index}"
    try:
        n = int(rec["n"])
        topo = build_topology(n, np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2),
                              undirected=bool(rec.get("undirected", True)))
        feats = np.asarray(rec["features"], dtype=np.float64).reshape(n, -1) if n else \
            np.zeros((0, header["d"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: malformed ({exc})") from None
    if feats.shape[1] != header["d"]:
        raise DatasetError(f"{where}: feature dimension {feats.shape[1]} != header d {header['d']}")
    g = Graph(topo, feats)
    task = header["task"]
    try:
        if task == "node":
            g.node_labels = np.asarray(rec["labels"], dtype=np.int64)
            if g.node_labels.shape != (n,):
                raise ValueError("one label per node expected")
        elif task == "graph-class":
            g.graph_label = int(rec["label"])
        elif task == "graph-reg":
            g.graph_label = float(rec["target"])
        elif task == "link":
            g.edge_labels = np.asarray(rec["edge_labels"], dtype=np.int64)
            if g.edge_labels.shape[0] != topo.undirected_edges().shape[0]:
                raise ValueError("one label per undirected edge expected")
        if "edge_features" in rec:
            ef = np.asarray(rec["edge_features"], dtype=np.float64).reshape(topo.num_entries, -1)
            if header.get("d_edge") is not None and ef.shape[1] != header["d_edge"]:
                raise ValueError(f"edge feature dimension {ef.shape[1]} != {header['d_edge']}")
            g.edge_features = ef
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: malformed ({exc})") from None
    return g


def dataset_read(path) -> GraphDataset:
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise DatasetError("header: not a JSON record") from None
        if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
            raise DatasetError("header: not a graphnorm dataset file")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetError(
                f"header: version {header.get('version')} unsupported (expected {FORMAT_VERSION})")
        if header.get("task") not in TASKS:
            raise DatasetError(f"header: unknown task {header.get('task')!r}")
        graphs = []
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"record {index}: parse error ({exc.msg})") from None
            graphs.append(_parse_record(rec, header, index))
    if header.get("count") is not None and len(graphs) != header["count"]:
        raise DatasetError(
            f"record {len(graphs)}: file truncated, header promises {header['count']} records")
    return GraphDataset(header["task"], graphs, header.get("num_classes"))


def split_paths(prefix) -> dict[str, str]:
    prefix = str(prefix)
    return {split: f"{prefix}.{split}.graphs" for split in ("train", "val", "test")}
