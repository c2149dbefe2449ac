"""Node-, adjacency-, graph- and batch-scope normalization and their learned mix.

All four scopes standardize with ``(h - mean) / (std + eps)`` using biased
statistics.  They differ only in which elements are pooled:

* node: the ``d`` entries of the row itself (layer norm without affine);
* adjacency: every entry of every row in the node's neighborhood, self
  included, giving one scalar mean/std per node;
* graph: per feature column, over the rows of the node's own graph;
* batch: per feature column, over all rows in the batch, with running
  statistics for inference.

The same functions normalize edge features when handed edge rows together
with a line-graph neighborhood and per-graph edge segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor, constant, parameter
from .graphs import GraphBatch, GraphTopology, Neighborhood

__all__ = [
    "EPS",
    "MOMENTUM",
    "NORMALIZERS",
    "NormStats",
    "RunningStats",
    "NormScope",
    "GnParams",
    "Norm",
    "parse_norm",
    "node_wise_normalize",
    "adjacency_wise_normalize",
    "graph_wise_normalize",
    "batch_wise_normalize",
    "edge_normalize",
    "constrain_lambda",
    "unified_gn_forward",
]

EPS = 1e-5
MOMENTUM = 0.9
NORMALIZERS = ("n", "a", "g", "b")


@dataclass
class NormStats:
    """Statistics of one normalization call.

    ``std`` is the denominator actually used, i.e. the biased standard
    deviation plus ``eps``.  Shapes: n x 1 for node/adjacency scope, N x d
    for graph scope, 1 x d for batch scope.
    """

    scope: str
    mean: np.ndarray
    std: np.ndarray
    eps: float = EPS


@dataclass
class RunningStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = MOMENTUM
    update_count: int = 0

    @classmethod
    def init(cls, dim: int, momentum: float = MOMENTUM) -> "RunningStats":
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        return cls(np.zeros((1, dim)), np.ones((1, dim)), momentum, 0)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        a = self.momentum
        self.running_mean = a * self.running_mean + (1.0 - a) * np.asarray(batch_mean).reshape(1, -1)
        self.running_var = a * self.running_var + (1.0 - a) * np.asarray(batch_var).reshape(1, -1)
        self.update_count += 1

    def copy(self) -> "RunningStats":
        return RunningStats(self.running_mean.copy(), self.running_var.copy(),
                            self.momentum, self.update_count)


@dataclass(eq=False)
class NormScope:
    """Structures the scope normalizers need for one set of rows."""

    neighborhood: Neighborhood | None = None
    graphs: Segments | None = None

    @classmethod
    def for_nodes(cls, batch: GraphBatch, self_inclusive: bool = True) -> "NormScope":
        return cls(_adjacency_scope(batch.topology, self_inclusive), batch.segment)

    @classmethod
    def for_edges(cls, batch: GraphBatch, with_adjacency: bool = True) -> "NormScope":
        nb = _adjacency_scope(batch.line_topology, True) if with_adjacency else None
        return cls(nb, batch.edge_segment)


def _adjacency_scope(topology: GraphTopology, self_inclusive: bool) -> Neighborhood:
    if self_inclusive:
        return topology.scope(True)
    nb = topology.scope(False)
    lonely = np.flatnonzero(topology.degrees == 0)
    if lonely.size == 0:
        return nb
    # an empty neighborhood falls back to the node's own row
    owner = np.concatenate([nb.segments.ids, lonely])
    member = np.concatenate([nb.index, lonely])
    order = np.argsort(owner, kind="stable")
    return Neighborhood(member[order], Segments(owner[order], topology.num_nodes))


def _std(var: Tensor, eps: float) -> Tensor:
    return ad.sqrt(var) + constant(eps)


def node_wise_normalize(H: Tensor, eps: float = EPS) -> tuple[Tensor, NormStats]:
    mu = ad.row_mean(H)
    std = _std(ad.row_var(H), eps)
    out = (H - mu) / std
    return out, NormStats("node", mu.values, std.values, eps)


def adjacency_wise_normalize(H: Tensor, topology: GraphTopology | Neighborhood,
                             eps: float = EPS, self_inclusive: bool = True
                             ) -> tuple[Tensor, NormStats]:
    nb = topology if isinstance(topology, Neighborhood) else _adjacency_scope(topology, self_inclusive)
    if len(nb.segments) and nb.segments.num_segments != H.rows:
        raise ad.ShapeError("neighborhood does not cover every row")
    owners = nb.segments.ids
    pooled = constant((nb.counts * H.cols).astype(np.float64)[:, None])
    mu = ad.segment_sum(ad.gather_rows(ad.row_sum(H), nb.index), nb.segments) / pooled
    diff = ad.gather_rows(H, nb.index) - ad.gather_rows(mu, owners)
    var = ad.segment_sum(ad.row_sum(ad.square(diff)), nb.segments) / pooled
    std = _std(var, eps)
    return (H - mu) / std, NormStats("adjacency", mu.values, std.values, eps)


def _column_normalize(H: Tensor, segments: Segments, eps: float):
    mu = ad.segment_mean(H, segments)
    diff = H - ad.gather_rows(mu, segments.ids)
    var = ad.segment_mean(ad.square(diff), segments)
    std = _std(var, eps)
    return diff / ad.gather_rows(std, segments.ids), mu, var, std


def graph_wise_normalize(H: Tensor, segments: Segments, eps: float = EPS) -> tuple[Tensor, NormStats]:
    if len(segments) != H.rows:
        raise ad.ShapeError("graph segment map does not cover every row")
    out, mu, _, std = _column_normalize(H, segments, eps)
    return out, NormStats("graph", mu.values, std.values, eps)


def batch_wise_normalize(H: Tensor, training: bool = True, running: RunningStats | None = None,
                         eps: float = EPS) -> tuple[Tensor, NormStats]:
    """Batch normalization over all rows.

    In training mode the batch statistics are used and, if ``running`` is
    given, folded into it.  In inference mode ``running`` supplies the
    statistics; a fresh one (mean 0, var 1) is allowed.
    """
    if training:
        if H.rows < 1:
            raise ValueError("batch-wise normalization needs at least one row")
        whole = Segments(np.zeros(H.rows, dtype=np.int64), 1)
        out, mu, var, std = _column_normalize(H, whole, eps)
        if running is not None:
            running.update(mu.values, var.values)
        return out, NormStats("batch", mu.values, std.values, eps)
    if running is None:
        raise ValueError("inference-mode batch normalization needs running statistics")
    mu = constant(running.running_mean)
    std = constant(np.sqrt(running.running_var) + eps)
    return (H - mu) / std, NormStats("batch", mu.values, std.values, eps)


def _normalize(u: str, X: Tensor, scope: NormScope, training: bool,
               running: RunningStats | None, eps: float) -> Tensor:
    if u == "n":
        return node_wise_normalize(X, eps)[0]
    if u == "a":
        if scope.neighborhood is None:
            raise ValueError("adjacency-wise normalization needs a neighborhood")
        return adjacency_wise_normalize(X, scope.neighborhood, eps)[0]
    if u == "g":
        if scope.graphs is None:
            raise ValueError("graph-wise normalization needs graph segments")
        return graph_wise_normalize(X, scope.graphs, eps)[0]
    if u == "b":
        return batch_wise_normalize(X, training, running, eps)[0]
    raise ValueError(f"unknown normalizer {u!r}")


_VARIANTS = {"node": "n", "adjacency": "a", "graph": "g", "batch": "b"}


def edge_normalize(E: Tensor, variant: str, scope: NormScope, training: bool = True,
                   running: RunningStats | None = None, eps: float = EPS) -> Tensor:
    """Normalize edge rows.  ``scope`` comes from :meth:`NormScope.for_edges`."""
    u = _VARIANTS.get(variant, variant)
    return _normalize(u, E, scope, training, running, eps)


class GnParams:
    """Gate weights and affine parameters of one learned normalization layer.

    Raw gates start at 1 so the constrained weights are uniform over the
    active normalizers.
    """

    def __init__(self, dim: int, active=NORMALIZERS, prefix: str = ""):
        active = tuple(u for u in NORMALIZERS if u in set(active))
        if not active:
            raise ValueError("at least one normalizer must be active")
        unknown = set(active) - set(NORMALIZERS)
        if unknown:
            raise ValueError(f"unknown normalizers {sorted(unknown)}")
        self.dim = dim
        self.active = active
        self.raw = {u: parameter(np.ones((1, dim)), name=f"{prefix}lambda_{u}") for u in NORMALIZERS}
        self.gamma = parameter(np.ones((1, dim)), name=f"{prefix}gamma")
        self.beta = parameter(np.zeros((1, dim)), name=f"{prefix}beta")

    def parameters(self) -> dict[str, Tensor]:
        out = {f"lambda_{u}": self.raw[u] for u in NORMALIZERS}
        out["gamma"] = self.gamma
        out["beta"] = self.beta
        return out


def constrain_lambda(params: GnParams) -> dict[str, Tensor]:
    """Clip active raw gates at zero and rescale each column to sum to one.

    A column whose active gates all clip to zero gets uniform weights.
    Inactive normalizers get exact zeros.
    """
    active = params.active
    clipped = {u: ad.clip_min(params.raw[u], 0.0) for u in active}
    total = clipped[active[0]]
    for u in active[1:]:
        total = total + clipped[u]
    dead = (total.values == 0.0).astype(np.float64)
    out = {}
    if dead.any():
        fill = constant(dead / len(active))
        denom = total + constant(dead)
        for u in active:
            out[u] = (clipped[u] + fill) / denom
    else:
        for u in active:
            out[u] = clipped[u] / total
    for u in NORMALIZERS:
        if u not in out:
            out[u] = constant(np.zeros((1, params.dim)))
    return out


def unified_gn_forward(H: Tensor, scope: NormScope, params: GnParams, training: bool = True,
                       running: RunningStats | None = None, eps: float = EPS) -> Tensor:
    """``gamma * sum_u lambda_u * normalize_u(H) + beta`` over the active normalizers."""
    lam = constrain_lambda(params)
    mix = None
    for u in params.active:
        term = lam[u] * _normalize(u, H, scope, training, running, eps)
        mix = term if mix is None else mix + term
    return params.gamma * mix + params.beta


def parse_norm(spec: str) -> tuple[str, tuple[str, ...]]:
    """``none | n | a | g | b | gn | gn:<subset>`` -> (kind, active normalizers)."""
    spec = spec.strip().lower()
    if spec == "none":
        return "none", ()
    if spec in NORMALIZERS:
        return "single", (spec,)
    if spec == "gn":
        return "gn", NORMALIZERS
    if spec.startswith("gn:"):
        parts = [p.strip() for p in spec[3:].split(",") if p.strip()]
        if not parts or any(p not in NORMALIZERS for p in parts) or len(set(parts)) != len(parts):
            raise ValueError(f"bad normalizer subset in {spec!r}")
        return "gn", tuple(u for u in NORMALIZERS if u in parts)
    raise ValueError(f"unknown norm {spec!r}")


@dataclass(eq=False)
class Norm:
    """A normalization slot inside a layer.

    ``kind`` is ``none`` (identity), ``single`` (one normalizer with affine
    scale and shift) or ``gn`` (learned mixture).  Single mode reuses the
    mixture machinery with one active gate, whose weight is identically 1.
    """

    kind: str
    dim: int
    active: tuple[str, ...] = ()
    prefix: str = ""
    params: GnParams | None = field(default=None, init=False)
    running: RunningStats | None = field(default=None, init=False)

    def __post_init__(self):
        if self.kind not in ("none", "single", "gn"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind != "none":
            self.params = GnParams(self.dim, self.active, self.prefix)
            if "b" in self.params.active:
                self.running = RunningStats.init(self.dim)

    @classmethod
    def from_spec(cls, spec: str, dim: int, prefix: str = "") -> "Norm":
        kind, active = parse_norm(spec)
        return cls(kind, dim, active, prefix)

    @property
    def is_gn(self) -> bool:
        return self.kind == "gn"

    def parameters(self) -> dict[str, Tensor]:
        return {} if self.params is None else self.params.parameters()

    def __call__(self, X: Tensor, scope: NormScope, training: bool = True) -> Tensor:
        if self.kind == "none":
            return X
        return unified_gn_forward(X, scope, self.params, training, self.running)
