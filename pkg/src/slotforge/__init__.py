"""Masked multi-query slot attention for unsupervised object discovery.

A library plus CLI that groups pre-extracted image patch tokens into
object slots: background-biased patch masking during training, several
independently parameterized query heads sharing one key/value pair,
Hungarian-matched head fusion at inference, spatial-broadcast
reconstruction, and class-agnostic localization metrics.
"""

__version__ = "0.1.0"

from .attention import AttentionState, HeadBank, SlotSet
from .autodiff import Parameter, Tensor
from .config import TrainConfig
from .decoder import DecodedScene, DecoderParams
from .features import FeatureMap, GroundTruth, SyntheticSceneSpec
from .fusion import Assignment, SimilarityMatrix
from .masking import MaskingConfig, MaskReport
from .metrics import EvalReport, SegmentationResult

__all__ = [
    "AttentionState", "Assignment", "DecodedScene", "DecoderParams",
    "EvalReport", "FeatureMap", "GroundTruth", "HeadBank", "MaskReport",
    "MaskingConfig", "Parameter", "SegmentationResult", "SimilarityMatrix",
    "SlotSet", "SyntheticSceneSpec", "Tensor", "TrainConfig", "__version__",
]
