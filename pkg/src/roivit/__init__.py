"""ROI-aware dual-branch multiscale vision transformer, from scratch.

A numpy-backed tensor engine with reverse-mode autodiff, the dual-branch
pooling-attention backbone with CLS cross-attention fusion, Score-CAM and
threshold-segmentation ROI generators, confusion-matrix metrics, and a
deterministic training/evaluation CLI.
"""

from .errors import (
    ConfigError,
    DatasetError,
    FormatError,
    GeneratorError,
    NumericalError,
    RoiVitError,
    ShapeError,
    UsageError,
)
from .metrics import ConfusionMatrix, MetricReport, report
from .model import ModelConfig, RoiVit, build, load_checkpoint, save_checkpoint, stage_shapes
from .patches import PatchEmbedding, TokenSequence, render_roi_input, tokenize
from .roi import (
    CamRoiProvider,
    MaskFileRoiProvider,
    RoiMap,
    SegRoiProvider,
    SmallCnn,
    ThresholdSegmenter,
    precompute_rois,
    score_cam,
    segment,
)
from .tensor import Tensor
from .train import TrainConfig, evaluate, export_saliency, parse_config_file, toy_config, train

__version__ = "0.1.0"

__all__ = [
    "CamRoiProvider",
    "ConfigError",
    "ConfusionMatrix",
    "DatasetError",
    "FormatError",
    "GeneratorError",
    "MaskFileRoiProvider",
    "MetricReport",
    "ModelConfig",
    "NumericalError",
    "PatchEmbedding",
    "RoiMap",
    "RoiVit",
    "RoiVitError",
    "SegRoiProvider",
    "ShapeError",
    "SmallCnn",
    "Tensor",
    "ThresholdSegmenter",
    "TokenSequence",
    "TrainConfig",
    "UsageError",
    "build",
    "evaluate",
    "export_saliency",
    "load_checkpoint",
    "parse_config_file",
    "precompute_rois",
    "render_roi_input",
    "report",
    "save_checkpoint",
    "score_cam",
    "segment",
    "stage_shapes",
    "tokenize",
    "toy_config",
    "train",
]
