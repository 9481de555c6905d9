"""Channel pruning laboratory: second-order retraining-free loss-change
estimation, mask-sensitivity channel scores, pruning loops, and the
ground-truth oracles that verify them."""

from .autograd import FdConfig, LeafId
from .costmodel import ChannelId, ChannelCost, CouplingGroup
from .datasets import Dataset, DatasetSpec, gen_dataset
from .influence import (AccumulatorState, LossChangeReport, ScoreVector,
                        SolverChoice, sensitivity_scores, prop1_loss_change)
from .net import GatedModel, LayerSpec, TrainConfig, build_model
from .pruner import PruneConfig, PruneLog
from .oracle import QuadraticTestbed, make_quadratic_testbed

__version__ = "0.1.0"
