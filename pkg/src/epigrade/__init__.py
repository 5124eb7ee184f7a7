"""Grading masked epithelium bands from ordered vertical segments."""

from .encoder import GRADES, EncoderConfig
from .fusion import AttentionReport, FusionConfig, SegmentLogitSequence
from .localize import EpitheliumSample, VerticalSegment
from .pipeline import RunConfig, run_pipeline

__all__ = [
    "GRADES",
    "AttentionReport",
    "EncoderConfig",
    "EpitheliumSample",
    "FusionConfig",
    "RunConfig",
    "SegmentLogitSequence",
    "VerticalSegment",
    "run_pipeline",
]
__version__ = "0.1.0"
