"""Desk-scale learned video codec with dual-path enhancement.

The public surface mirrors how the codec is used: configure, encode,
decode, train, measure. Everything else is importable from the submodules.
"""
from .container import BitstreamContainer, FrameRecord, FrameType
from .core import (CheckpointMismatchError, CodecConfig, CodecError,
                   ConfigError, CorruptStreamError, Frame, InvalidInputError,
                   MetricDomainError, MotionField, TrainingDivergedError)
from .metrics import RdCurve, RdPoint, bdbr, ms_ssim, psnr, rd_report
from .model import CodecModel, load_bundle
from .pipeline import GopPlan, decode_sequence, encode_sequence
from .training import TrainPlan, Trainer

__version__ = "0.1.0"

__all__ = [
    "BitstreamContainer", "FrameRecord", "FrameType",
    "CheckpointMismatchError", "CodecConfig", "CodecError", "ConfigError",
    "CorruptStreamError", "Frame", "InvalidInputError", "MetricDomainError",
    "MotionField", "TrainingDivergedError",
    "RdCurve", "RdPoint", "bdbr", "ms_ssim", "psnr", "rd_report",
    "CodecModel", "load_bundle",
    "GopPlan", "decode_sequence", "encode_sequence",
    "TrainPlan", "Trainer",
    "__version__",
]
