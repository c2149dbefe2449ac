"""``graphnorm`` command line: gen, train, eval, gradcheck, inspect-weights, replay.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .graphs import DatasetError, GraphDataset, GraphError, SbmConfig, TASKS, dataset_read, \
    dataset_write, sbm_generate
from .gradcheck import gradcheck_suite
from .model import ARCHS, CheckpointError, load_checkpoint, save_checkpoint
from .norms import NORMALIZERS, parse_norm
from .train import TrainConfig, make_batches, evaluate, extract_lambda_distribution, train

log = logging.getLogger("graphnorm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "val", "test")
LAMBDA_COLUMNS = ["layer"] + [f"lambda_{u}" for u in NORMALIZERS]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(target, columns: list[str], rows: list[dict]) -> None:
    """Header plus rows in fixed column order; floats with 17 significant digits."""
    own = isinstance(target, (str, Path))
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
    finally:
        if own:
            fh.close()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _default_seed() -> int:
    raw = os.environ.get("GRAPHNORM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GRAPHNORM_SEED must be an integer, got {raw!r}") from None


def _manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: dict,
              outputs: list[str], started: str) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}
    _write_json(out_dir / "manifest.json", {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": config.get("seed"),
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    })


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def split_counts(total: int) -> tuple[int, int, int]:
    """80/10/10 split by graph; rounding leftovers go to the training split."""
    val = total // 10
    test = total // 10
    return total - val - test, val, test


def cmd_gen(args) -> int:
    started = _now()
    if args.p_inter >= args.p_intra:
        raise UsageError(f"--p-inter ({args.p_inter}) must be smaller than --p-intra ({args.p_intra})")
    checks = [
        ("--graphs", args.graphs >= 3, "must be >= 3 so every split is non-empty"),
        ("--clusters", args.clusters >= 1, "must be >= 1"),
        ("--nodes-min", args.nodes_min >= args.clusters, "must be >= --clusters"),
        ("--nodes-max", args.nodes_max >= args.nodes_min, "must be >= --nodes-min"),
        ("--p-intra", 0 <= args.p_intra <= 1, "must lie in [0, 1]"),
        ("--p-inter", 0 <= args.p_inter <= 1, "must lie in [0, 1]"),
    ]
    for flag, ok, why in checks:
        if not ok:
            raise UsageError(f"{flag} {why}")
    cfg = SbmConfig(num_graphs=args.graphs, nodes_min=args.nodes_min, nodes_max=args.nodes_max,
                    num_clusters=args.clusters, p_intra=args.p_intra, p_inter=args.p_inter,
                    seed=args.seed, task=args.task, balanced=args.balanced)
    graphs = sbm_generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(len(graphs))
    parts = {"train": graphs[:n_train], "val": graphs[n_train:n_train + n_val],
             "test": graphs[n_train + n_val:]}
    classes = args.clusters if args.task == "node" else None
    outputs = []
    for split, gs in parts.items():
        path = out / f"{split}.graphs"
        dataset_write(path, gs, task=args.task,
                      num_classes=classes if args.task == "node" else None)
        outputs.append(path.name)
        print(f"{split}\t{len(gs)}\t{path}")
    _manifest(out, "gen", args, {}, outputs, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _load_split(data: Path, split: str) -> GraphDataset:
    path = data / f"{split}.graphs"
    if not path.exists():
        raise DataError(f"missing split file {path}")
    try:
        return dataset_read(path)
    except (DatasetError, GraphError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_splits(data: Path) -> dict[str, GraphDataset]:
    sets = {s: _load_split(data, s) for s in SPLITS}
    base = sets["train"]
    for s, ds in sets.items():
        if ds.task != base.task:
            raise DataError(f"split {s} has task {ds.task!r}, train has {base.task!r}")
        if ds.feature_dim != base.feature_dim:
            raise DataError(f"split {s} has feature dimension {ds.feature_dim}, "
                            f"train has {base.feature_dim}")
    return sets


def _metric_rows(report) -> list[dict]:
    return [dict(r) for r in report.epochs]


def cmd_train(args) -> int:
    started = _now()
    try:
        parse_norm(args.norm)
    except ValueError as exc:
        raise UsageError(f"--norm: {exc}") from None
    if args.lr <= 0:
        raise UsageError("--lr must be > 0")
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    for flag, v in (("--depth", args.depth), ("--hidden", args.hidden),
                    ("--batch-size", args.batch_size), ("--heads", args.heads)):
        if v < 1:
            raise UsageError(f"{flag} must be >= 1")
    if args.heads > 1 and args.arch != "gat":
        raise UsageError("--heads applies to --arch gat only")
    data = Path(args.data)
    sets = _load_splits(data)
    config = TrainConfig(arch=args.arch, depth=args.depth, hidden=args.hidden, norm=args.norm,
                         heads=args.heads, optimizer=args.optimizer, learning_rate=args.lr,
                         epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                         patience=args.patience)
    report, model = train(config, sets["train"], sets["val"], sets["test"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metric = report.metric
    write_csv(out / "metrics.csv", ["epoch", "batch_loss", "train_loss", "train_metric", "val_loss",
                                         "val_metric"],
              _metric_rows(report))
    node_rows = [r for r in report.lambdas if r["stream"] == "node"]
    edge_rows = [r for r in report.lambdas if r["stream"] == "edge"]
    outputs = ["metrics.csv", "report.json", "checkpoint.npz"]
    if report.lambdas:
        write_csv(out / "lambda.csv", LAMBDA_COLUMNS, node_rows)
        write_csv(out / "lambda_history.csv", ["epoch", "layer", "stream"] + LAMBDA_COLUMNS[1:],
                  report.lambda_history)
        outputs += ["lambda.csv", "lambda_history.csv"]
        if edge_rows:
            write_csv(out / "lambda_edge.csv", LAMBDA_COLUMNS, edge_rows)
            outputs.append("lambda_edge.csv")
    summary = report.numbers()
    summary["wall_clock"] = report.wall_clock
    summary["config"] = vars(config)
    _write_json(out / "report.json", summary)
    save_checkpoint(out / "checkpoint.npz", model, extra={"batch_size": args.batch_size,
                                                           "train_config": vars(config)})
    _manifest(out, "train", args, {"data": str(data)}, outputs, started)
    test_value = report.test.get(metric)
    print(f"best_epoch\t{report.best_epoch}")
    print(f"test_{metric}\t{_fmt(test_value)}")
    if report.diverged:
        log.error("training diverged; partial report written to %s", out)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, extra = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise DataError(str(exc)) from None
    ds = _load_split(Path(args.data), args.split)
    cfg = model.config
    problems = []
    if ds.task != cfg.task:
        problems.append(f"task: data {ds.task!r} vs checkpoint {cfg.task!r}")
    if ds.feature_dim != cfg.in_dim:
        problems.append(f"d: data {ds.feature_dim} vs checkpoint {cfg.in_dim}")
    if cfg.task in ("node", "graph-class") and ds.num_classes is not None \
            and ds.num_classes > cfg.out_dim:
        problems.append(f"num_classes: data {ds.num_classes} vs checkpoint {cfg.out_dim}")
    if problems:
        raise DataError("checkpoint and data are incompatible: " + "; ".join(problems))
    batch_size = args.batch_size or int(extra.get("batch_size", 8))
    loss, metrics = evaluate(model, make_batches(ds.graphs, batch_size))
    row = {"split": args.split, "loss": loss, **metrics}
    cols = ["split", "loss"] + list(metrics)
    write_csv(sys.stdout, cols, [row])
    if args.out:
        write_csv(args.out, cols, [row])
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / inspect-weights
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    try:
        report = gradcheck_suite(args.scope, trials=args.trials, seed=args.seed)
    except KeyError as exc:
        raise UsageError(f"--scope: {exc.args[0]}") from None
    rows = [{"check": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed}
            for r in report.results]
    write_csv(sys.stdout, ["check", "max_rel_error", "passed"], rows)
    log.info("gradcheck finished in %.2f s", report.seconds)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_inspect_weights(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise DataError(str(exc)) from None
    rows = [r for r in extract_lambda_distribution(model) if r["stream"] == args.stream]
    if not rows:
        raise DataError(f"checkpoint has no learned normalization layers ({args.stream} stream)")
    write_csv(sys.stdout, LAMBDA_COLUMNS, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def _argv_from_manifest(manifest: dict) -> list[str]:
    command = manifest["command"]
    argv = [command]
    for key, value in manifest["config"].items():
        if value is None:
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
            continue
        argv += [flag, str(value)]
    return argv


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {args.manifest}: {exc}") from None
    if manifest.get("command") not in ("gen", "train"):
        raise DataError(f"manifest command {manifest.get('command')!r} cannot be replayed")
    if args.out:
        manifest["config"]["out"] = args.out
    return main(_argv_from_manifest(manifest))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphnorm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate SBM train/val/test splits")
    g.add_argument("--task", choices=TASKS, default="node")
    g.add_argument("--graphs", type=int, default=200)
    g.add_argument("--nodes-min", type=int, default=30)
    g.add_argument("--nodes-max", type=int, default=50)
    g.add_argument("--clusters", type=int, default=2)
    g.add_argument("--p-intra", type=float, default=0.5)
    g.add_argument("--p-inter", type=float, default=0.05)
    g.add_argument("--balanced", action="store_true", help="equal cluster sizes")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write reports")
    t.add_argument("--data", required=True, help="directory written by gen")
    t.add_argument("--arch", choices=ARCHS, default="gcn")
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--heads", type=int, default=1)
    t.add_argument("--norm", default="gn", help="none | n | a | g | b | gn | gn:<subset>")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--patience", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--batch-size", type=int, default=None)
    e.add_argument("--out", default=None, help="also write the CSV here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", default="all")
    c.add_argument("--trials", type=int, default=2)
    c.add_argument("--seed", type=int, default=None)
    c.set_defaults(func=cmd_gradcheck)

    w = sub.add_parser("inspect-weights", help="per-layer normalizer weights of a checkpoint")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--stream", choices=("node", "edge"), default="node")
    w.set_defaults(func=cmd_inspect_weights)

    r = sub.add_parser("replay", help="re-run a gen or train command from its manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", default=None, help="write outputs elsewhere")
    r.set_defaults(func=cmd_replay)

    for p in (g, t, e, c, w, r):
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        if args.command in ("gen", "train"):
            # manifests record absolute paths so replay works from any directory
            for key in ("data", "out"):
                if getattr(args, key, None) is not None:
                    setattr(args, key, str(Path(getattr(args, key)).resolve()))
        return args.func(args)
    except UsageError as exc:
        print(f"graphnorm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, GraphError, CheckpointError) as exc:
        print(f"graphnorm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, NumericError) as exc:
        print(f"graphnorm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"graphnorm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
