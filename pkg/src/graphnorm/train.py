"""Optimizers, training loop, evaluation and gate-weight extraction."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .graphs import Graph, GraphBatch, GraphDataset, batch_concat
from .layers import loss_and_metrics, metrics_from_values
from .model import GNN, TASK_HEADS, ModelConfig
from .norms import NORMALIZERS

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "SGD",
    "Adam",
    "make_optimizer",
    "optimizer_step",
    "primary_metric",
    "evaluate",
    "train",
    "build_model",
    "make_batches",
    "extract_lambda_distribution",
]

log = logging.getLogger(__name__)

PRIMARY_METRIC = {"node": "balanced_accuracy", "graph-class": "balanced_accuracy",
                  "link": "f1", "graph-reg": "mae"}


@dataclass
class TrainConfig:
    arch: str = "gcn"
    depth: int = 4
    hidden: int = 32
    norm: str = "gn"
    heads: int = 1
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    patience: int | None = None

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, Tensor]) -> None:
        updates = {}
        for name, p in params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
            updates[name] = p.values - self.lr * p.grad
        for name, v in updates.items():
            params[name].values = v


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.adam_epsilon)


def optimizer_step(params: dict[str, Tensor], optimizer) -> None:
    """Apply one update from the gradients stored on ``params``."""
    optimizer.step(params)


def primary_metric(task: str) -> str:
    return PRIMARY_METRIC[task]


def _better(task: str, new: float, old: float | None) -> bool:
    if old is None:
        return True
    return new < old if task == "graph-reg" else new > old


@dataclass
class MetricsReport:
    seed: int
    task: str
    metric: str
    epochs: list[dict] = field(default_factory=list)
    lambda_history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float | None = None
    test: dict[str, float] = field(default_factory=dict)
    test_loss: float | None = None
    lambdas: list[dict] = field(default_factory=list)
    diverged: bool = False
    stopped_early: bool = False
    wall_clock: float = 0.0

    def numbers(self) -> dict:
        """Everything except wall-clock time, for reproducibility checks."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


def make_batches(graphs: Sequence[Graph], batch_size: int, order=None) -> list[GraphBatch]:
    idx = range(len(graphs)) if order is None else order
    idx = list(idx)
    return [batch_concat([graphs[i] for i in idx[s:s + batch_size]])
            for s in range(0, len(idx), batch_size)]


def evaluate(model: GNN, batches: Sequence[GraphBatch]) -> tuple[float, dict[str, float]]:
    """Inference-mode loss and metrics over a fixed list of batches."""
    kind = TASK_HEADS[model.config.task]
    preds, labels, losses, weights = [], [], [], []
    with ad.no_grad():
        for b in batches:
            out = model.forward(b, training=False)
            y = model.labels_for(b)
            loss, _ = loss_and_metrics(out, y, kind)
            preds.append(out.values)
            labels.append(np.asarray(y))
            losses.append(loss.item())
            weights.append(out.rows)
    pred = np.concatenate(preds, axis=0)
    lab = np.concatenate(labels)
    mean_loss = float(np.dot(losses, weights) / np.sum(weights))
    return mean_loss, metrics_from_values(pred, lab, kind)


def build_model(config: TrainConfig, train_set: GraphDataset) -> GNN:
    task = train_set.task
    classes = train_set.num_classes or 1
    return GNN(ModelConfig(
        arch=config.arch,
        task=task,
        in_dim=train_set.feature_dim,
        out_dim=classes,
        hidden=config.hidden,
        depth=config.depth,
        norm=config.norm,
        edge_in_dim=train_set.edge_feature_dim,
        heads=config.heads,
        seed=config.seed,
    ))


def _lambda_rows(model: GNN, epoch: int | None = None) -> list[dict]:
    rows = []
    for layer, stream, lam in model.lambda_table():
        row = {} if epoch is None else {"epoch": epoch}
        row.update({"layer": layer, "stream": stream})
        row.update({f"lambda_{u}": float(x) for u, x in zip(NORMALIZERS, lam)})
        rows.append(row)
    return rows


def train(config: TrainConfig, train_set: GraphDataset, val_set: GraphDataset,
          test_set: GraphDataset, model: GNN | None = None) -> tuple[MetricsReport, GNN]:
    """Train with per-epoch validation; report test metrics of the best epoch.

    Epoch 0 holds the metrics of the untrained model.  The checkpoint with
    the best validation metric (earliest on ties) is restored before the
    test evaluation, so the returned model is that checkpoint.
    """
    config.validate()
    start = time.perf_counter()
    task = train_set.task
    metric = primary_metric(task)
    model = model or build_model(config, train_set)
    params = model.parameters()
    optimizer = make_optimizer(config)
    report = MetricsReport(seed=config.seed, task=task, metric=metric)

    eval_train = make_batches(train_set.graphs, config.batch_size)
    eval_val = make_batches(val_set.graphs, config.batch_size)
    eval_test = make_batches(test_set.graphs, config.batch_size)

    def record(epoch: int, batch_loss: float | None) -> float:
        # train_loss is measured in inference mode so epoch 0 is comparable;
        # batch_loss averages the training-step losses of the epoch
        tl, tm = evaluate(model, eval_train)
        vl, vm = evaluate(model, eval_val)
        row = {"epoch": epoch, "batch_loss": tl if batch_loss is None else batch_loss,
               "train_loss": tl, "train_metric": tm[metric], "val_loss": vl,
               "val_metric": vm[metric]}
        report.epochs.append(row)
        report.lambda_history.extend(_lambda_rows(model, epoch))
        log.info("epoch %d train_loss %.4f val_%s %.4f", epoch, row["train_loss"], metric, vm[metric])
        return vm[metric]

    best_state = model.state()
    report.best_val = record(0, None)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        losses = []
        try:
            for batch in make_batches(train_set.graphs, config.batch_size, order):
                model.zero_grad()
                with Tape() as tape:
                    out = model.forward(batch, training=True)
                    loss, _ = loss_and_metrics(out, model.labels_for(batch), TASK_HEADS[task])
                    tape.backward(loss)
                optimizer.step(params)
                losses.append(loss.item())
        except NonFiniteError as exc:
            log.warning("diverged at epoch %d: %s", epoch, exc)
            report.diverged = True
            break
        val = record(epoch, float(np.mean(losses)))
        if _better(task, val, report.best_val):
            report.best_val, report.best_epoch = val, epoch
            best_state = model.state()
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                report.stopped_early = True
                break

    model.load_state(best_state)
    model.zero_grad()
    report.test_loss, report.test = evaluate(model, eval_test)
    report.lambdas = _lambda_rows(model)
    report.wall_clock = time.perf_counter() - start
    return report, model


def extract_lambda_distribution(model: GNN) -> list[dict]:
    """Per-layer gate weights averaged over the feature dimension.

    Returns one dict per learned-normalization slot, in layer order, with
    keys ``layer``, ``stream`` and ``lambda_n/a/g/b``.  A model without such
    slots yields an empty list.
    """
    rows = _lambda_rows(model)
    if not rows:
        log.warning("model has no learned normalization layers")
    return rows
