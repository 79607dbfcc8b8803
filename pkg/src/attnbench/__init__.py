"""Driver-attention benchmark toolkit.

Attention-map aggregation and metrics, human-weighted sampling (HWS) of
training windows, a small ConvLSTM attention predictor written in numpy, and
attended-object analysis.
"""

from .hws import FrameWeightTable, WeightFunction, assign_weights, fit_weight_function
from .maps import AttentionMap, ClipSequence, GazeSample, SmoothingConfig, aggregate_gazes
from .metrics import FixationMask, MetricReport, auc, correlation_coefficient, kl_divergence, nss
from .objects import AttendedCriterion, DetectionRecord
from .predictor import PredictorConfig, PredictorParams

__all__ = [
    "AttendedCriterion",
    "AttentionMap",
    "ClipSequence",
    "DetectionRecord",
    "FixationMask",
    "FrameWeightTable",
    "GazeSample",
    "MetricReport",
    "PredictorConfig",
    "PredictorParams",
    "SmoothingConfig",
    "WeightFunction",
    "aggregate_gazes",
    "assign_weights",
    "auc",
    "correlation_coefficient",
    "fit_weight_function",
    "kl_divergence",
    "nss",
]

__version__ = "0.1.0"
