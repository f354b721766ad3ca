from .estimator import MaskPrediction, TextPromptSegmenter, find_candidates
from .losses import bce_loss, combined_loss, dice_loss
from .model import (
    DEFAULT_PROMPT_SUITE,
    ImageEncoder,
    MaskDecoder,
    SegModelConfig,
    TextPromptEncoder,
    parameter_checksum,
    tokenize,
)

__all__ = [
    "DEFAULT_PROMPT_SUITE",
    "ImageEncoder",
    "MaskDecoder",
    "MaskPrediction",
    "SegModelConfig",
    "TextPromptEncoder",
    "TextPromptSegmenter",
    "bce_loss",
    "combined_loss",
    "dice_loss",
    "find_candidates",
    "parameter_checksum",
    "tokenize",
]
