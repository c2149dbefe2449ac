"""Apply the four normalizers and the learned mixture to one small batch."""

import numpy as np

from graphnorm.graphs import Graph, batch_concat, build_topology
from graphnorm.norms import (GnParams, NormScope, adjacency_wise_normalize, batch_wise_normalize,
                             constrain_lambda, graph_wise_normalize, node_wise_normalize,
                             unified_gn_forward)

rng = np.random.default_rng(1)
triangle = Graph(build_topology(3, [(0, 1), (1, 2), (0, 2)]), rng.normal(size=(3, 2)))
path = Graph(build_topology(4, [(0, 1), (1, 2), (2, 3)]), rng.normal(2.0, 3.0, size=(4, 2)))
batch = batch_concat([triangle, path])
H = batch.H

for name, (out, stats) in {
    "node": node_wise_normalize(H),
    "adjacency": adjacency_wise_normalize(H, batch.topology),
    "graph": graph_wise_normalize(H, batch.segment),
    "batch": batch_wise_normalize(H, training=True),
}.items():
    print(f"{name:>9}: mean shape {stats.mean.shape}, first row {np.round(out.values[0], 4)}")

params = GnParams(2)
params.raw["b"].values = np.array([[3.0, -1.0]])  # the second column clips to zero
lam = constrain_lambda(params)
print("weights per column:", {u: lam[u].values.ravel().round(3).tolist() for u in "nagb"})

mixed = unified_gn_forward(H, NormScope.for_nodes(batch), params)
print("mixture output, first row:", np.round(mixed.values[0], 4))
