"""Message-passing layers, task heads, losses and metrics.

Every layer follows the same pattern: aggregate over the neighborhood,
pass through the normalization slot, apply the nonlinearity, then add the
residual.  Layer weights carry no bias, matching the update rules they
implement; the normalization slot supplies the shift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor, constant, parameter
from .graphs import GraphBatch, GraphTopology, Neighborhood, build_topology
from .norms import Norm, NormScope

__all__ = [
    "glorot",
    "gcn_aggregate",
    "gcn_layer",
    "gat_attention",
    "gat_heads",
    "gat_layer",
    "gatedgcn_gates",
    "gatedgcn_layer",
    "MESSAGE_PASSING_FORMS",
    "message_passing_conformance",
    "TaskHead",
    "HEAD_KINDS",
    "readout",
    "cross_entropy",
    "binary_cross_entropy",
    "mae_loss",
    "balanced_accuracy",
    "weighted_accuracy",
    "f1_score",
    "mean_absolute_error",
    "metrics_from_values",
    "loss_and_metrics",
    "ACTIVATIONS",
]

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ad.relu,
    "identity": lambda x: x,
    "leaky_relu": ad.leaky_relu,
    "sigmoid": ad.sigmoid,
}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _neighborhood(topology: GraphTopology | Neighborhood, self_inclusive: bool) -> Neighborhood:
    if isinstance(topology, Neighborhood):
        return topology
    return topology.scope(self_inclusive)


def _finish(H: Tensor, agg: Tensor, norm: Norm | None, scope: NormScope | None,
            training: bool, activation: str, residual: bool) -> Tensor:
    z = agg if norm is None else norm(agg, scope, training)
    out = ACTIVATIONS[activation](z)
    if residual and out.shape == H.shape:
        out = H + out
    return out


# ---------------------------------------------------------------------------
# GCN
# ---------------------------------------------------------------------------


def gcn_aggregate(H: Tensor, topology, W: Tensor) -> Tensor:
    """Mean of ``W h_u`` over the self-inclusive neighborhood."""
    nb = _neighborhood(topology, True)
    return ad.segment_mean(ad.gather_rows(H @ W, nb.index), nb.segments)


def gcn_layer(H: Tensor, topology, W: Tensor, norm: Norm | None = None,
              scope: NormScope | None = None, training: bool = True,
              residual: bool = True, activation: str = "relu") -> Tensor:
    return _finish(H, gcn_aggregate(H, topology, W), norm, scope, training, activation, residual)


# ---------------------------------------------------------------------------
# GAT
# ---------------------------------------------------------------------------


def _segment_max(values: np.ndarray, segments: Segments) -> np.ndarray:
    out = np.full((segments.num_segments, values.shape[1]), -np.inf)
    np.maximum.at(out, segments.ids, values)
    return np.where(np.isfinite(out), out, 0.0)


def gat_attention(H: Tensor, topology, W: Tensor, a: Tensor, slope: float = 0.2) -> Tensor:
    """Softmax attention over each self-inclusive neighborhood.

    Returns one coefficient per neighborhood entry (rows aligned with
    ``topology.scope(True)``).
    """
    nb = _neighborhood(topology, True)
    owners = nb.segments.ids
    Z = H @ W
    pair = ad.concat_cols([ad.gather_rows(Z, nb.index), ad.gather_rows(Z, owners)])
    score = ad.leaky_relu(pair @ a, slope)
    shift = constant(_segment_max(score.values, nb.segments)[owners])
    ex = ad.exp(score - shift)
    return ex / ad.gather_rows(ad.segment_sum(ex, nb.segments), owners)


def gat_heads(H: Tensor, topology, heads, slope: float = 0.2) -> Tensor:
    """Attention-weighted neighbor sums for each ``(W, a)`` head, concatenated."""
    nb = _neighborhood(topology, True)
    outs = []
    for W, a in heads:
        coef = gat_attention(H, nb, W, a, slope)
        msg = ad.gather_rows(H @ W, nb.index) * coef
        outs.append(ad.segment_sum(msg, nb.segments))
    return outs[0] if len(outs) == 1 else ad.concat_cols(outs)


def gat_layer(H: Tensor, topology, heads, projection: Tensor | None = None,
              norm: Norm | None = None, scope: NormScope | None = None, training: bool = True,
              residual: bool = True, activation: str = "relu", slope: float = 0.2) -> Tensor:
    agg = gat_heads(H, topology, heads, slope)
    if projection is not None:
        agg = agg @ projection
    return _finish(H, agg, norm, scope, training, activation, residual)


# ---------------------------------------------------------------------------
# GatedGCN
# ---------------------------------------------------------------------------


def gatedgcn_gates(E_hat: Tensor, incoming: Segments, eps: float = 1e-6) -> Tensor:
    """``sigmoid(e_vu) / (sum_u' sigmoid(e_vu') + eps)``, elementwise per feature.

    ``incoming`` groups edge rows by their receiving node.
    """
    s = ad.sigmoid(E_hat)
    denom = ad.gather_rows(ad.segment_sum(s, incoming), incoming.ids) + constant(eps)
    return s / denom


def gatedgcn_layer(H: Tensor, E: Tensor, topology: GraphTopology, params: dict[str, Tensor],
                   node_norm: Norm | None = None, node_scope: NormScope | None = None,
                   edge_norm: Norm | None = None, edge_scope: NormScope | None = None,
                   training: bool = True, residual: bool = True, eps: float = 1e-6
                   ) -> tuple[Tensor, Tensor]:
    """Edge-gated update of both node and edge streams.

    Edge rows follow the topology's CSR order: row ``k`` carries the message
    from ``topology.indices[k]`` to its row owner.
    """
    if E.cols != H.cols:
        raise ad.ShapeError(f"node width {H.cols} and edge width {E.cols} differ")
    if E.rows != topology.num_entries:
        raise ad.ShapeError(f"{E.rows} edge rows for {topology.num_entries} edges")
    nb = topology.scope(False)
    src, dst = nb.index, nb.segments.ids
    A, B, C, W, U = (params[k] for k in ("A", "B", "C", "W", "U"))

    pre_e = ad.gather_rows(H @ A, dst) + ad.gather_rows(H @ B, src) + E @ C
    z_e = pre_e if edge_norm is None else edge_norm(pre_e, edge_scope, training)
    E_new = ad.relu(z_e)
    if residual:
        E_new = E + E_new

    gates = gatedgcn_gates(E_new, nb.segments, eps)
    agg = ad.segment_sum(gates * ad.gather_rows(H @ U, src), nb.segments)
    pre_h = H @ W + agg
    z_h = pre_h if node_norm is None else node_norm(pre_h, node_scope, training)
    H_new = ad.relu(z_h)
    if residual:
        H_new = H + H_new
    return H_new, E_new


# ---------------------------------------------------------------------------
# generic message-passing form
# ---------------------------------------------------------------------------

# h_v' = psi(C{h_v, M{phi(h_u) | u in N(v)}})
MESSAGE_PASSING_FORMS = {
    "gcn": {
        "phi": "u -> W h_u",
        "M": "mean over N(v) including v (1/deg_v, deg counts v)",
        "C": "self enters through the self-inclusive neighborhood",
        "psi": "Norm then ReLU, plus residual h_v",
    },
    "gat": {
        "phi": "u -> W h_u per head",
        "M": "softmax(LeakyReLU(a^T [W h_u || W h_v]))-weighted sum over N(v) including v",
        "C": "self enters through the self-inclusive neighborhood; heads concatenated",
        "psi": "optional head projection, Norm, activation, plus residual h_v",
    },
    "gatedgcn": {
        "phi": "u -> e_vu * U h_u with edge gates from the updated edge stream",
        "M": "sum over N(v) (self excluded)",
        "C": "W h_v + aggregate",
        "psi": "Norm then ReLU, plus residual h_v",
    },
}


def _shuffled_copy(topo: GraphTopology, rng: np.random.Generator):
    perm = rng.permutation(topo.num_nodes)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    edges = topo.undirected_edges()
    relabeled = build_topology(topo.num_nodes, perm[edges], undirected=True)
    # scramble neighbor order inside every CSR row
    indices = relabeled.indices.copy()
    for v in range(relabeled.num_nodes):
        lo, hi = relabeled.offsets[v], relabeled.offsets[v + 1]
        indices[lo:hi] = rng.permutation(indices[lo:hi])
    scrambled = GraphTopology(relabeled.num_nodes, relabeled.offsets.copy(), indices, True)
    return scrambled, perm, inv


def message_passing_conformance(kind: str, seed: int = 0, num_nodes: int = 9, dim: int = 3,
                                atol: float = 1e-12) -> bool:
    """Check that ``kind`` is invariant to node relabeling and neighbor order.

    A layer that aggregates over N(v) with a symmetric operator and then
    combines with h_v yields the same output, permuted, on a relabeled graph
    whose CSR rows list neighbors in scrambled order.
    """
    if kind not in MESSAGE_PASSING_FORMS:
        raise ValueError(f"unknown layer kind {kind!r}")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(num_nodes, k=1)
    keep = rng.random(iu.size) < 0.4
    topo = build_topology(num_nodes, np.stack([iu[keep], ju[keep]], axis=1))
    other, perm, inv = _shuffled_copy(topo, rng)
    H = constant(rng.normal(size=(num_nodes, dim)))
    H_perm = constant(H.values[inv])
    W = constant(glorot(rng, dim, dim))

    if kind == "gcn":
        a = gcn_layer(H, topo, W).values
        b = gcn_layer(H_perm, other, W).values
        return bool(np.allclose(a, b[perm], atol=atol, rtol=0))
    if kind == "gat":
        heads = [(W, constant(rng.normal(size=(2 * dim, 1))))]
        a = gat_layer(H, topo, heads).values
        b = gat_layer(H_perm, other, heads).values
        return bool(np.allclose(a, b[perm], atol=atol, rtol=0))

    params = {k: constant(glorot(rng, dim, dim)) for k in ("A", "B", "C", "W", "U")}
    # edge features keyed by (target, source) so both graphs see the same values
    e_val = {}
    src, dst = topo.directed_edges()
    for s, t in zip(src, dst):
        e_val[(int(t), int(s))] = rng.normal(size=dim)
    E = constant(np.array([e_val[(int(t), int(s))] for s, t in zip(src, dst)]))
    o_src, o_dst = other.directed_edges()
    E_perm = constant(np.array([e_val[(int(inv[t]), int(inv[s]))] for s, t in zip(o_src, o_dst)]))
    ha, ea = gatedgcn_layer(H, E, topo, params)
    hb, eb = gatedgcn_layer(H_perm, E_perm, other, params)
    if not np.allclose(ha.values, hb.values[perm], atol=atol, rtol=0):
        return False
    row_b = {(int(inv[t]), int(inv[s])): eb.values[k] for k, (s, t) in enumerate(zip(o_src, o_dst))}
    return all(np.allclose(ea.values[k], row_b[(int(t), int(s))], atol=atol, rtol=0)
               for k, (s, t) in enumerate(zip(src, dst)))


# ---------------------------------------------------------------------------
# heads and readout
# ---------------------------------------------------------------------------

HEAD_KINDS = ("node-classify", "link-predict", "graph-classify", "graph-regress")


@dataclass(eq=False)
class TaskHead:
    """Two-layer MLP mapping pooled features to predictions."""

    kind: str
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, kind: str, in_dim: int, hidden: int, out_dim: int,
               rng: np.random.Generator) -> "TaskHead":
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        width = 2 * in_dim if kind == "link-predict" else in_dim
        return cls(
            kind,
            parameter(glorot(rng, width, hidden), name="head.W1"),
            parameter(np.zeros((1, hidden)), name="head.b1"),
            parameter(glorot(rng, hidden, out_dim), name="head.W2"),
            parameter(np.zeros((1, out_dim)), name="head.b2"),
        )

    @property
    def out_dim(self) -> int:
        return self.W2.cols

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def __call__(self, X: Tensor) -> Tensor:
        return ad.relu(X @ self.W1 + self.b1) @ self.W2 + self.b2


def readout(kind: str, H: Tensor, batch: GraphBatch, head: TaskHead) -> Tensor:
    if kind != head.kind:
        raise ValueError(f"head is {head.kind!r}, readout asked for {kind!r}")
    if kind == "node-classify":
        return head(H)
    if kind == "link-predict":
        if batch.pair_src is None:
            raise ValueError("batch carries no candidate pairs for link prediction")
        return head(ad.concat_cols([ad.gather_rows(H, batch.pair_src),
                                    ad.gather_rows(H, batch.pair_dst)]))
    return head(ad.segment_mean(H, batch.segment))


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def _check_classes(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = _check_classes(labels, logits.cols)
    if labels.size != logits.rows:
        raise ad.ShapeError(f"{logits.rows} logit rows for {labels.size} labels")
    shift = constant(logits.values.max(axis=1, keepdims=True))
    z = logits - shift
    log_norm = ad.log(ad.row_sum(ad.exp(z)))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = ad.row_sum((z - log_norm) * constant(onehot))
    return -ad.total_mean(picked)


def binary_cross_entropy(logits: Tensor, labels) -> Tensor:
    y = constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    if y.rows != logits.rows or logits.cols != 1:
        raise ad.ShapeError("binary_cross_entropy needs m x 1 logits and m labels")
    return ad.total_mean(ad.softplus(logits) - logits * y)


def mae_loss(pred: Tensor, target) -> Tensor:
    y = constant(np.asarray(target, dtype=np.float64).reshape(pred.shape))
    return ad.total_mean(ad.absolute(pred - y))


def balanced_accuracy(pred, labels) -> float:
    """Mean over the classes present in ``labels`` of per-class recall."""
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    classes = np.unique(labels)
    recalls = [np.mean(pred[labels == c] == c) for c in classes]
    return float(np.mean(recalls)) if recalls else 0.0


def weighted_accuracy(pred, labels) -> float:
    """Per-class recall averaged with class-frequency weights (plain accuracy)."""
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    return float(np.mean(pred == labels)) if labels.size else 0.0


def f1_score(pred, labels) -> float:
    pred = np.asarray(pred).reshape(-1).astype(bool)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    tp = np.sum(pred & labels)
    fp = np.sum(pred & ~labels)
    fn = np.sum(~pred & labels)
    return float(2 * tp / (2 * tp + fp + fn)) if tp else 0.0


def mean_absolute_error(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred).reshape(-1) - np.asarray(target).reshape(-1))))


def metrics_from_values(pred: np.ndarray, labels: np.ndarray, kind: str) -> dict[str, float]:
    if kind in ("node-classify", "graph-classify"):
        cls = np.argmax(pred, axis=1)
        return {"balanced_accuracy": balanced_accuracy(cls, labels),
                "weighted_accuracy": weighted_accuracy(cls, labels)}
    if kind == "link-predict":
        cls = (pred[:, 0] > 0).astype(np.int64)
        return {"f1": f1_score(cls, labels), "accuracy": weighted_accuracy(cls, labels)}
    return {"mae": mean_absolute_error(pred, labels)}


def loss_and_metrics(predictions: Tensor, labels, kind: str) -> tuple[Tensor, dict[str, float]]:
    """Training loss plus the metrics reported for ``kind``.

    Classification uses cross-entropy, link prediction binary cross-entropy
    on one logit per pair, regression the mean absolute error.
    """
    labels = np.asarray(labels)
    if kind in ("node-classify", "graph-classify"):
        loss = cross_entropy(predictions, labels)
    elif kind == "link-predict":
        loss = binary_cross_entropy(predictions, labels)
    elif kind == "graph-regress":
        loss = mae_loss(predictions, labels)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return loss, metrics_from_values(predictions.values, labels, kind)
