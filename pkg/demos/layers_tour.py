"""One forward pass through each layer type on the same graph."""

import numpy as np

from graphnorm.autodiff import constant
from graphnorm.graphs import build_topology
from graphnorm.layers import gat_layer, gatedgcn_layer, gcn_layer, glorot

rng = np.random.default_rng(2)


def weight(fan_in, fan_out):
    return constant(glorot(rng, fan_in, fan_out))


topo = build_topology(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)])
d = 3
H = constant(rng.normal(size=(5, d)))
E = constant(rng.normal(size=(topo.num_entries, d)))

print("gcn\n", gcn_layer(H, topo, weight(d, d)).values.round(3))

heads = [(weight(d, d), weight(2 * d, 1)) for _ in range(2)]
print("gat, two heads concatenated\n",
      gat_layer(H, topo, heads, projection=weight(2 * d, d)).values.round(3))

params = {k: weight(d, d) for k in "ABCWU"}
H_new, E_new = gatedgcn_layer(H, E, topo, params)
print("gatedgcn nodes\n", H_new.values.round(3))
print("gatedgcn edge features shape", E_new.shape)
