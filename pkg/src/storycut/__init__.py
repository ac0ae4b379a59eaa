"""Cutting long videos into self-contained stories.

A per-frame boundary-aware scorer proposes candidate stories; a deep
recurrent head classifies and refines them. Everything is plain numpy.
"""
__version__ = "0.1.0"

from .pipeline import PipelineConfig, truncate_video
from .temporal import FrameLabel, Interval, ScoredInterval

__all__ = ["FrameLabel", "Interval", "PipelineConfig", "ScoredInterval", "truncate_video", "__version__"]
