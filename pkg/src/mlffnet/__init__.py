"""Multi-level feature fusion segmentation network on a from-scratch
autodiff tensor core, with loss, metrics, data, and training utilities."""

from .encoder import Encoder, EncoderConfig, FeaturePyramid
from .errors import (ConfigurationError, ContractViolation, DataIOError,
                     GradCheckError)
from .estimator import PolypSegmenter
from .loss import LossBreakdown, basic_loss, pixel_weights, total_loss, \
    weighted_bce, weighted_iou
from .metrics import (MetricReport, dice_iou, e_measure, evaluate_dataset,
                      mae, metric_report, s_measure, weighted_fmeasure)
from .model import (MlffNet, PredictionSet, VARIANTS, build_model)
from .tensor import Tape, Tensor
from .train import (TrainConfig, ablate, evaluate, gradcheck,
                    load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractViolation", "DataIOError", "GradCheckError",
    "Encoder", "EncoderConfig", "FeaturePyramid", "PolypSegmenter",
    "LossBreakdown", "basic_loss", "pixel_weights", "total_loss",
    "weighted_bce", "weighted_iou", "MetricReport", "dice_iou", "e_measure",
    "evaluate_dataset", "mae", "metric_report", "s_measure",
    "weighted_fmeasure", "MlffNet", "PredictionSet", "VARIANTS",
    "build_model", "Tape", "Tensor", "TrainConfig", "ablate", "evaluate",
    "gradcheck", "load_checkpoint", "save_checkpoint", "train",
]
