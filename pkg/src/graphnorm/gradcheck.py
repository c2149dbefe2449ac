"""Finite-difference verification of every backward pass.

Each check builds a small random instance, reduces the output to a scalar
with a fixed random weighting ``sum(out * R)``, and compares the taped
gradient of every input against central differences.  The error measure is
``max |analytic - numeric| / max(1, |numeric|)`` over all elements.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tape, Tensor, constant, parameter
from .graphs import Graph, batch_concat, build_topology
from .layers import (TaskHead, binary_cross_entropy, cross_entropy, gat_layer, gatedgcn_layer,
                     gcn_layer, glorot, mae_loss, readout)
from .model import GNN, ModelConfig
from .norms import (GnParams, Norm, NormScope, adjacency_wise_normalize,
                    batch_wise_normalize, edge_normalize, graph_wise_normalize,
                    node_wise_normalize, unified_gn_forward)

__all__ = ["GradcheckResult", "GradcheckReport", "gradcheck_suite", "check_gradients", "CHECKS",
           "TOLERANCE", "STEP"]

TOLERANCE = 1e-5
STEP = 1e-6


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


@dataclass
class GradcheckReport:
    results: list[GradcheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[GradcheckResult]:
        return [r for r in self.results if not r.passed]


def check_gradients(loss_fn: Callable[[], Tensor], inputs: dict[str, Tensor],
                    h: float = STEP) -> float:
    """Worst relative error between taped and central-difference gradients.

    ``loss_fn`` must read the current values of ``inputs`` each call and
    return a 1 x 1 tensor.
    """
    for t in inputs.values():
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    worst = 0.0
    for t in inputs.values():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        base = t.values.copy()
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            v = base.copy()
            v[idx] += h
            t.values = v
            with ad.no_grad():
                up = loss_fn().item()
            v[idx] -= 2 * h
            t.values = v
            with ad.no_grad():
                down = loss_fn().item()
            numeric[idx] = (up - down) / (2 * h)
        t.values = base
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    R = constant(rng.normal(size=out.shape))
    return lambda o: ad.total_sum(o * R)


def _away_from(rng, shape, kink=0.0, margin=0.1, scale=1.0):
    x = rng.normal(scale=scale, size=shape)
    close = np.abs(x - kink) < margin
    x[close] = kink + np.sign(x[close] - kink + 1e-300) * margin * (1 + rng.random(close.sum()))
    return x


def _random_graph(rng: np.random.Generator, n: int | None = None, p: float = 0.45):
    n = n or int(rng.integers(3, 9))
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    # a path guarantees every node has at least one neighbor
    path = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    edges = np.concatenate([np.stack([iu[keep], ju[keep]], axis=1), path])
    return build_topology(n, edges)


def _random_batch(rng: np.random.Generator, d: int, graphs: int = 2, task: str = "node",
                  classes: int = 2, edge_dim: int | None = None):
    out = []
    for _ in range(graphs):
        topo = _random_graph(rng, int(rng.integers(3, 5)))
        g = Graph(topo, rng.normal(size=(topo.num_nodes, d)))
        if task == "node":
            g.node_labels = rng.integers(0, classes, topo.num_nodes)
        elif task == "graph-class":
            g.graph_label = int(rng.integers(0, classes))
        elif task == "graph-reg":
            g.graph_label = float(rng.normal())
        else:
            g.edge_labels = rng.integers(0, 2, topo.undirected_edges().shape[0])
        if edge_dim is not None:
            g.edge_features = rng.normal(size=(topo.num_entries, edge_dim))
        out.append(g)
    return batch_concat(out)


# ---------------------------------------------------------------------------
# individual checks; each returns the worst error of one random instance
# ---------------------------------------------------------------------------


def _op_check(kind: str):
    def run(rng: np.random.Generator) -> float:
        n, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        x = parameter(rng.normal(size=(n, d)))
        extra = {}
        if kind == "matmul":
            y = parameter(rng.normal(size=(d, int(rng.integers(1, 4)))))
            extra["y"] = y
            f = lambda: ad.matmul(x, y)
        elif kind in ("add", "sub", "mul_elementwise"):
            y = parameter(rng.normal(size=(1, d)))
            extra["y"] = y
            f = lambda: ad.forward_op(kind, x, y)
        elif kind == "div_elementwise":
            y = parameter(_away_from(rng, (n, 1), margin=0.5))
            extra["y"] = y
            f = lambda: ad.div(x, y)
        elif kind in ("relu", "abs", "clip_min"):
            x.values = _away_from(rng, (n, d))
            f = lambda: ad.forward_op(kind, x)
        elif kind in ("sqrt", "log"):
            x.values = rng.uniform(0.3, 2.0, size=(n, d))
            f = lambda: ad.forward_op(kind, x)
        elif kind == "leaky_relu":
            x.values = _away_from(rng, (n, d))
            f = lambda: ad.leaky_relu(x, 0.2)
        elif kind == "concat_cols":
            y = parameter(rng.normal(size=(n, 2)))
            extra["y"] = y
            f = lambda: ad.concat_cols([x, y])
        elif kind in ("segment_sum", "segment_mean"):
            seg = Segments(np.sort(rng.integers(0, 3, n)), 3)
            f = lambda: ad.forward_op(kind, x, seg)
        elif kind == "gather_rows":
            idx = rng.integers(0, n, n + 3)
            f = lambda: ad.gather_rows(x, idx)
        elif kind == "scatter_add_rows":
            idx = rng.integers(0, 4, n)
            f = lambda: ad.scatter_add_rows(x, idx, 4)
        elif kind == "scale":
            f = lambda: ad.scale(x, 1.7)
        elif kind == "row_var":
            f = lambda: ad.row_var(x)
        else:
            f = lambda: ad.forward_op(kind, x)
        reduce = _weighted(f(), rng)
        return check_gradients(lambda: reduce(f()), {"x": x, **extra})
    return run


def _norm_inputs(rng, d=None):
    d = d or int(rng.integers(2, 5))
    batch = _random_batch(rng, d, graphs=2, edge_dim=d)
    return batch, parameter(batch.H.values * rng.uniform(0.5, 2.0) + rng.normal()), d


def _check_node_norm(rng):
    _, H, _ = _norm_inputs(rng)
    f = lambda: node_wise_normalize(H)[0]
    r = _weighted(f(), rng)
    return check_gradients(lambda: r(f()), {"H": H})


def _check_adjacency_norm(rng):
    batch, H, _ = _norm_inputs(rng)
    f = lambda: adjacency_wise_normalize(H, batch.topology)[0]
    r = _weighted(f(), rng)
    return check_gradients(lambda: r(f()), {"H": H})


def _check_graph_norm(rng):
    batch, H, _ = _norm_inputs(rng)
    f = lambda: graph_wise_normalize(H, batch.segment)[0]
    r = _weighted(f(), rng)
    return check_gradients(lambda: r(f()), {"H": H})


def _check_batch_norm(rng):
    _, H, _ = _norm_inputs(rng)
    f = lambda: batch_wise_normalize(H, training=True)[0]
    r = _weighted(f(), rng)
    return check_gradients(lambda: r(f()), {"H": H})


def _check_edge_norms(rng):
    batch, _, d = _norm_inputs(rng)
    scope = NormScope.for_edges(batch)
    E = parameter(rng.normal(size=(batch.num_edges, d)))
    worst = 0.0
    for variant in ("node", "adjacency", "graph", "batch"):
        f = lambda: edge_normalize(E, variant, scope, training=True)
        r = _weighted(f(), rng)
        worst = max(worst, check_gradients(lambda: r(f()), {"E": E}))
    return worst


def _gn_params(rng, d, active=("n", "a", "g", "b")):
    params = GnParams(d, active)
    for t in params.raw.values():
        t.values = _away_from(rng, (1, d), margin=0.2) * 0.5 + 0.5
    params.gamma.values = rng.normal(size=(1, d))
    params.beta.values = rng.normal(size=(1, d))
    return params


def _check_unified(rng):
    batch, H, d = _norm_inputs(rng)
    scope = NormScope.for_nodes(batch)
    params = _gn_params(rng, d)
    f = lambda: unified_gn_forward(H, scope, params, training=True)
    r = _weighted(f(), rng)
    inputs = {"H": H, **params.parameters()}
    return check_gradients(lambda: r(f()), inputs)


def _check_unified_subset(rng):
    batch, H, d = _norm_inputs(rng)
    scope = NormScope.for_nodes(batch)
    params = _gn_params(rng, d, ("g", "b"))
    f = lambda: unified_gn_forward(H, scope, params, training=True)
    r = _weighted(f(), rng)
    return check_gradients(lambda: r(f()), {"H": H, **params.parameters()})


def _check_gcn(rng):
    batch, H, d = _norm_inputs(rng)
    W = parameter(glorot(rng, d, d))
    f = lambda: gcn_layer(H, batch.topology, W, activation="identity")
    r = _weighted(f(), rng)
    return check_gradients(lambda: r(f()), {"H": H, "W": W})


def _check_gat(heads: int):
    def run(rng):
        batch, H, d = _norm_inputs(rng)
        ws = {}
        for k in range(heads):
            ws[f"W{k}"] = parameter(glorot(rng, d, d))
            ws[f"a{k}"] = parameter(rng.normal(size=(2 * d, 1)))
        P = parameter(glorot(rng, heads * d, d)) if heads > 1 else None
        pairs = [(ws[f"W{k}"], ws[f"a{k}"]) for k in range(heads)]
        f = lambda: gat_layer(H, batch.topology, pairs, P, activation="identity")
        r = _weighted(f(), rng)
        inputs = {"H": H, **ws}
        if P is not None:
            inputs["P"] = P
        return check_gradients(lambda: r(f()), inputs)
    return run


def _check_gatedgcn(rng):
    batch, H, d = _norm_inputs(rng)
    E = parameter(rng.normal(size=(batch.num_edges, d)))
    weights = {k: parameter(glorot(rng, d, d)) for k in ("A", "B", "C", "W", "U")}
    node_scope = NormScope.for_nodes(batch)
    edge_scope = NormScope.for_edges(batch)
    node_norm = Norm("gn", d, ("n", "a", "g", "b"))
    edge_norm = Norm("gn", d, ("n", "a", "g", "b"))
    node_norm.params = _gn_params(rng, d)
    edge_norm.params = _gn_params(rng, d)
    node_norm.running = edge_norm.running = None

    def f():
        Hn, En = gatedgcn_layer(H, E, batch.topology, weights, node_norm, node_scope,
                                edge_norm, edge_scope, training=True)
        return ad.concat_cols([ad.total_sum(Hn * Rh), ad.total_sum(En * Re)])

    Hn, En = gatedgcn_layer(H, E, batch.topology, weights, node_norm, node_scope,
                            edge_norm, edge_scope, training=True)
    Rh = constant(rng.normal(size=Hn.shape))
    Re = constant(rng.normal(size=En.shape))
    inputs = {"H": H, "E": E, **weights}
    inputs.update({f"node.{k}": t for k, t in node_norm.parameters().items()})
    inputs.update({f"edge.{k}": t for k, t in edge_norm.parameters().items()})
    return check_gradients(lambda: ad.row_sum(f()), inputs)


def _check_losses(rng):
    worst = 0.0
    logits = parameter(rng.normal(size=(6, 3)))
    labels = rng.integers(0, 3, 6)
    worst = max(worst, check_gradients(lambda: cross_entropy(logits, labels), {"logits": logits}))
    one = parameter(rng.normal(size=(6, 1)))
    y = rng.integers(0, 2, 6)
    worst = max(worst, check_gradients(lambda: binary_cross_entropy(one, y), {"logits": one}))
    target = one.values + _away_from(rng, (6, 1), margin=0.2)
    worst = max(worst, check_gradients(lambda: mae_loss(one, target), {"pred": one}))
    return worst


def _check_readouts(rng):
    worst = 0.0
    d = 3
    for kind, task in (("node-classify", "node"), ("link-predict", "link"),
                       ("graph-classify", "graph-class"), ("graph-regress", "graph-reg")):
        batch = _random_batch(rng, d, task=task)
        H = parameter(rng.normal(size=(batch.num_nodes, d)))
        head = TaskHead.create(kind, d, 4, 2, rng)
        # keep hidden pre-activations away from the ReLU kink
        head.b1.values = rng.uniform(0.5, 1.0, size=head.b1.shape)
        f = lambda: readout(kind, H, batch, head)
        r = _weighted(f(), rng)
        worst = max(worst, check_gradients(lambda: r(f()), {"H": H, **head.parameters()}))
    return worst


def _check_model(depth: int, arch: str):
    def run(rng):
        d = 3
        task = "node"
        batch = _random_batch(rng, 2, task=task, edge_dim=None)
        model = GNN(ModelConfig(arch=arch, task=task, in_dim=2, out_dim=2, hidden=d,
                                depth=depth, norm="gn", seed=int(rng.integers(1 << 30))))
        for _, _, norm in model.norm_slots():
            norm.running = None
        for _, _, norm in model.norm_slots():
            for t in norm.params.raw.values():
                t.values = rng.uniform(0.3, 1.5, size=t.shape)

        def f():
            out = model.forward(batch, training=True)
            return cross_entropy(out, batch.node_labels)

        return check_gradients(f, model.parameters())
    return run


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    **{f"op:{k}": _op_check(k) for k in (
        "matmul", "add", "sub", "mul_elementwise", "div_elementwise", "scale", "relu",
        "leaky_relu", "sigmoid", "sqrt", "square", "exp", "log", "abs", "softplus", "clip_min",
        "concat_cols", "segment_sum", "segment_mean", "row_sum", "row_mean", "row_var",
        "gather_rows", "scatter_add_rows", "sum")},
    "node_wise_normalize": _check_node_norm,
    "adjacency_wise_normalize": _check_adjacency_norm,
    "graph_wise_normalize": _check_graph_norm,
    "batch_wise_normalize": _check_batch_norm,
    "edge_normalize": _check_edge_norms,
    "unified_gn_forward": _check_unified,
    "unified_gn_forward:g,b": _check_unified_subset,
    "gcn_layer": _check_gcn,
    "gat_layer": _check_gat(1),
    "gat_layer:heads=2": _check_gat(2),
    "gatedgcn_layer": _check_gatedgcn,
    "losses": _check_losses,
    "readouts": _check_readouts,
    "model:gcn:L=1": _check_model(1, "gcn"),
    "model:gcn:L=2": _check_model(2, "gcn"),
    "model:gat:L=2": _check_model(2, "gat"),
    "model:gatedgcn:L=2": _check_model(2, "gatedgcn"),
}


def gradcheck_suite(scope: str = "all", trials: int = 3, seed: int = 0) -> GradcheckReport:
    """Run the named check (or all of them) ``trials`` times each.

    ``scope`` is ``all``, a check name from :data:`CHECKS`, or a prefix such
    as ``op:`` or ``model:``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if scope == "all":
        names = list(CHECKS)
    elif scope in CHECKS:
        names = [scope]
    else:
        names = [k for k in CHECKS if k.startswith(scope)]
        if not names:
            raise KeyError(f"unknown gradcheck scope {scope!r}")
    start = time.perf_counter()
    report = GradcheckReport()
    order = list(CHECKS)
    for name in names:
        rng = np.random.default_rng([seed, order.index(name)])
        worst = max(CHECKS[name](rng) for _ in range(trials))
        report.results.append(GradcheckResult(name, worst, trials))
    report.seconds = time.perf_counter() - start
    return report
