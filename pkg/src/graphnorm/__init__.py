"""Graph normalization layers on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .autodiff import (GradEstimate, NonFiniteError, Segments, ShapeError, Tape, TapeError, Tensor,
                       constant, finite_diff_gradient, forward_op, no_grad, parameter)
from .graphs import (DatasetError, Graph, GraphBatch, GraphDataset, GraphError, GraphTopology,
                     SbmConfig, batch_concat, build_topology, dataset_read, dataset_write,
                     line_graph, sbm_generate)
from .norms import (GnParams, Norm, NormScope, NormStats, RunningStats, adjacency_wise_normalize,
                    batch_wise_normalize, constrain_lambda, edge_normalize, graph_wise_normalize,
                    node_wise_normalize, parse_norm, unified_gn_forward)
from .layers import (TaskHead, gat_layer, gatedgcn_layer, gcn_layer, loss_and_metrics,
                     message_passing_conformance, readout)
from .model import GNN, ModelConfig, load_checkpoint, save_checkpoint
from .train import MetricsReport, TrainConfig, evaluate, extract_lambda_distribution, train
from .gradcheck import gradcheck_suite
