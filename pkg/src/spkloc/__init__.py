"""Online multi-speaker localization and tracking with a small microphone array.

Pipeline: STFT front end with noise tracking and spectral subtraction,
direct-path relative transfer function (DP-RTF) features by recursive least
squares, an online complex-Gaussian-mixture localizer updated by
exponentiated gradient, and a variational-EM multi-speaker tracker.
"""

from .frontend import AudioBuffer, StftConfig
from .localizer import ArrayGeometry, LocalizerConfig
from .metrics import EvalReport, GroundTruth, evaluate
from .pipeline import Pipeline, PipelineConfig, RunResult, run
from .tracker import TrackerConfig

__all__ = ["ArrayGeometry", "AudioBuffer", "EvalReport", "GroundTruth", "LocalizerConfig",
           "Pipeline", "PipelineConfig", "RunResult", "StftConfig", "TrackerConfig",
           "evaluate", "run"]
__version__ = "0.1.0"
