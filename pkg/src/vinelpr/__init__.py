"""LiDAR place recognition toolkit for vineyard-style scenes.

Preprocessing, handcrafted baselines (Scan Context, FPFH), a small
trainable descriptor head with a nested (Matryoshka) ranking loss, a
synthetic vineyard generator and the retrieval-evaluation protocol.
"""
from .cloud import EmptyCloudError, NormalizationParams, PointCloud, ScanRecord, preprocess
from .evaluation import RecallReport, evaluate
from .head import DescriptorHead, DescriptorHeadParams, MatryoshkaDescriptor
from .ranking import LossConfig, mrl_loss, smooth_ap, tsap_loss
from .synth import VineyardSpec, generate_scan, generate_traversal
from .training import TrainConfig, train

__version__ = "0.1.0"
