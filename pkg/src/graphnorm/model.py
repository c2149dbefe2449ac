"""Full networks: input embedding, stacked message-passing layers, task head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant, parameter
from .graphs import GraphBatch
from .layers import TaskHead, gatedgcn_layer, gat_layer, gcn_layer, glorot, readout
from .norms import NORMALIZERS, Norm, NormScope, RunningStats, constrain_lambda, parse_norm

__all__ = ["ARCHS", "TASK_HEADS", "ModelConfig", "GNN", "save_checkpoint", "load_checkpoint",
           "CheckpointError"]

ARCHS = ("gcn", "gat", "gatedgcn")
TASK_HEADS = {
    "node": "node-classify",
    "link": "link-predict",
    "graph-class": "graph-classify",
    "graph-reg": "graph-regress",
}
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "gcn"
    task: str = "node"
    in_dim: int = 2
    out_dim: int = 2
    hidden: int = 32
    depth: int = 4
    norm: str = "gn"
    edge_in_dim: int | None = None
    heads: int = 1
    residual: bool = True
    gate_eps: float = 1e-6
    leaky_slope: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.task not in TASK_HEADS:
            raise ValueError(f"task must be one of {tuple(TASK_HEADS)}")
        if self.depth < 1 or self.hidden < 1 or self.heads < 1:
            raise ValueError("depth, hidden and heads must be >= 1")
        parse_norm(self.norm)


@dataclass(eq=False)
class _Layer:
    weights: dict[str, Tensor]
    norm: Norm
    edge_norm: Norm | None = None


@dataclass(eq=False)
class GNN:
    config: ModelConfig
    layers: list[_Layer] = field(init=False)

    def __post_init__(self):
        cfg = self.config
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.hidden
        self.embed_W = parameter(glorot(rng, cfg.in_dim, d), name="embed.W")
        self.embed_b = parameter(np.zeros((1, d)), name="embed.b")
        if cfg.arch == "gatedgcn":
            e_in = cfg.edge_in_dim or 1
            self.edge_embed_W = parameter(glorot(rng, e_in, d), name="edge_embed.W")
            self.edge_embed_b = parameter(np.zeros((1, d)), name="edge_embed.b")
        self.layers = []
        for i in range(cfg.depth):
            w = {}
            if cfg.arch == "gcn":
                w["W"] = parameter(glorot(rng, d, d))
            elif cfg.arch == "gat":
                for k in range(cfg.heads):
                    w[f"W{k}"] = parameter(glorot(rng, d, d))
                    w[f"a{k}"] = parameter(glorot(rng, 2 * d, 1))
                if cfg.heads > 1:
                    w["P"] = parameter(glorot(rng, cfg.heads * d, d))
            else:
                for k in ("A", "B", "C", "W", "U"):
                    w[k] = parameter(glorot(rng, d, d))
            norm = Norm.from_spec(cfg.norm, d, prefix=f"layer{i}.norm.")
            edge_norm = None
            if cfg.arch == "gatedgcn":
                edge_norm = Norm.from_spec(cfg.norm, d, prefix=f"layer{i}.edge_norm.")
            self.layers.append(_Layer(w, norm, edge_norm))
        out_dim = 1 if cfg.task in ("link", "graph-reg") else cfg.out_dim
        self.head = TaskHead.create(TASK_HEADS[cfg.task], d, d, out_dim, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {"embed.W": self.embed_W, "embed.b": self.embed_b}
        if self.config.arch == "gatedgcn":
            out["edge_embed.W"] = self.edge_embed_W
            out["edge_embed.b"] = self.edge_embed_b
        for i, layer in enumerate(self.layers):
            for k, t in layer.weights.items():
                out[f"layer{i}.{k}"] = t
            for k, t in layer.norm.parameters().items():
                out[f"layer{i}.norm.{k}"] = t
            if layer.edge_norm is not None:
                for k, t in layer.edge_norm.parameters().items():
                    out[f"layer{i}.edge_norm.{k}"] = t
        for k, t in self.head.parameters().items():
            out[f"head.{k}"] = t
        return out

    def running_stats(self) -> dict[str, RunningStats]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.norm.running is not None:
                out[f"layer{i}.norm"] = layer.norm.running
            if layer.edge_norm is not None and layer.edge_norm.running is not None:
                out[f"layer{i}.edge_norm"] = layer.edge_norm.running
        return out

    def norm_slots(self) -> list[tuple[int, str, Norm]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((i, "node", layer.norm))
            if layer.edge_norm is not None:
                out.append((i, "edge", layer.edge_norm))
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": t.values.copy() for k, t in self.parameters().items()}
        for k, rs in self.running_stats().items():
            state[f"running/{k}/mean"] = rs.running_mean.copy()
            state[f"running/{k}/var"] = rs.running_var.copy()
            state[f"running/{k}/count"] = np.array([rs.update_count])
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.parameters().items():
            key = f"param/{k}"
            if key not in state:
                raise CheckpointError(f"missing parameter {k}")
            if state[key].shape != t.shape:
                raise CheckpointError(f"parameter {k}: shape {state[key].shape} != {t.shape}")
            t.values = state[key]
        for k, rs in self.running_stats().items():
            rs.running_mean = np.array(state[f"running/{k}/mean"], dtype=np.float64)
            rs.running_var = np.array(state[f"running/{k}/var"], dtype=np.float64)
            rs.update_count = int(state[f"running/{k}/count"][0])

    # -- forward ----------------------------------------------------------------

    def _needs(self, u: str) -> bool:
        return any(n.params is not None and u in n.params.active for _, _, n in self.norm_slots())

    def forward(self, batch: GraphBatch, training: bool = True) -> Tensor:
        cfg = self.config
        if batch.H.cols != cfg.in_dim:
            raise ValueError(f"batch feature dimension {batch.H.cols} != model input {cfg.in_dim}")
        topo = batch.topology
        want_adj = self._needs("a")
        node_scope = NormScope.for_nodes(batch) if want_adj else NormScope(None, batch.segment)
        H = batch.H @ self.embed_W + self.embed_b

        if cfg.arch == "gatedgcn":
            if batch.E is not None:
                E_in = batch.E
                if E_in.cols != (cfg.edge_in_dim or 1):
                    raise ValueError(f"edge feature dimension {E_in.cols} != model {cfg.edge_in_dim}")
            else:
                if cfg.edge_in_dim not in (None, 1):
                    raise ValueError("model expects edge features, batch has none")
                E_in = constant(np.ones((batch.num_edges, 1)))
            E = E_in @ self.edge_embed_W + self.edge_embed_b
            edge_scope = NormScope.for_edges(batch, with_adjacency=want_adj)
            for layer in self.layers:
                H, E = gatedgcn_layer(H, E, topo, layer.weights, layer.norm, node_scope,
                                      layer.edge_norm, edge_scope, training,
                                      cfg.residual, cfg.gate_eps)
        elif cfg.arch == "gcn":
            for layer in self.layers:
                H = gcn_layer(H, topo, layer.weights["W"], layer.norm, node_scope, training,
                              cfg.residual)
        else:
            for layer in self.layers:
                w = layer.weights
                heads = [(w[f"W{k}"], w[f"a{k}"]) for k in range(cfg.heads)]
                H = gat_layer(H, topo, heads, w.get("P"), layer.norm, node_scope, training,
                              cfg.residual, slope=cfg.leaky_slope)
        return readout(self.head.kind, H, batch, self.head)

    __call__ = forward

    def labels_for(self, batch: GraphBatch) -> np.ndarray:
        task = self.config.task
        if task == "node":
            labels = batch.node_labels
        elif task == "link":
            labels = batch.pair_labels
        else:
            labels = batch.graph_labels
        if labels is None:
            raise ValueError(f"batch has no labels for task {task!r}")
        return labels

    def lambda_table(self) -> list[tuple[int, str, np.ndarray]]:
        """Constrained gate weights averaged over features, per GN slot."""
        rows = []
        for i, stream, norm in self.norm_slots():
            if not norm.is_gn:
                continue
            with ad.no_grad():
                lam = constrain_lambda(norm.params)
            rows.append((i, stream, np.array([lam[u].values.mean() for u in NORMALIZERS])))
        return rows


def save_checkpoint(path, model: GNN, extra: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "model": asdict(model.config), "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **model.state())


def load_checkpoint(path) -> tuple[GNN, dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            state = {k: data[k] for k in data.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} unsupported")
    model = GNN(ModelConfig(**meta["model"]))
    model.load_state(state)
    return model, meta.get("extra", {})
