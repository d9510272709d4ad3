"""Delta-gated sparse ConvLSTM with a FLOP cost model, a smooth Tchebycheff
accuracy/occupancy loss and a Gaussian-process preference-weight explorer."""

from .cost_model import acceleration_ratio, flops_dense_unit, flops_sparse_unit
from .delta_network import DeltaState, delta_step
from .objectives import ObjectiveVector, ScalarizationConfig, composite_loss, stch_scalarize, tch_scalarize
from .pareto import MultiTaskGP, ParetoRecord, acquire_next, dominance_filter, explore, gp_fit, gp_predict
from .sparse_conv import ConvKernel, dense_conv2d, sparse_conv2d
from .sparsest_cell import ConvLSTMCell, ModelConfig, SequenceModel, SparseSTCell
from .tensor_core import SparseTensor2D, to_dense, to_sparse
from .train import TrainConfig, evaluate_prediction, train_prediction, train_reconstruction

__version__ = "0.1.0"
