"""Generate a small two-community dataset and train a GCN with the learned mixture."""

from graphnorm.graphs import GraphDataset, SbmConfig, sbm_generate
from graphnorm.train import TrainConfig, extract_lambda_distribution, train

graphs = sbm_generate(SbmConfig(num_graphs=60, nodes_min=20, nodes_max=30, seed=0))
splits = [GraphDataset("node", part, 2) for part in (graphs[:48], graphs[48:54], graphs[54:])]

config = TrainConfig(arch="gcn", depth=4, norm="gn", epochs=15, seed=0)
report, model = train(config, *splits)

for row in report.epochs[::5]:
    print(f"epoch {row['epoch']:>2}  train loss {row['train_loss']:.4f}  "
          f"val balanced acc {row['val_metric']:.4f}")
print(f"best epoch {report.best_epoch}, test {report.test}")

for row in extract_lambda_distribution(model):
    weights = "  ".join(f"{u}={row[f'lambda_{u}']:.3f}" for u in "nagb")
    print(f"layer {row['layer']}: {weights}")
