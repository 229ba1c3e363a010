"""Dual-branch dense U-Net for four-class lumbar CT segmentation, with synthetic phantoms."""

from .data import ClassId, DatasetSplit, ImageSample, load_corpus, split_corpus
from .metrics import ConfusionMatrix, MetricsReport, evaluate
from .network import DualDenseUNet, NetworkConfig, build_network, layer_plan
from .phantom import PhantomConfig, generate_corpus
from .training import Checkpoint, TrainConfig, predict, train

__version__ = "0.1.0"
