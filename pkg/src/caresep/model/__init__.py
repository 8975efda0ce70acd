"""Swin-Unet separator with a shared query encoder."""

from .config import PRESETS, ModelConfig, desk_config, paper_config, tiny_config
from .frontend import BandSplitFrontend
from .network import Decoder, Encoded, SeparatorModel, SharedEncoder

__all__ = [
    "ModelConfig", "desk_config", "paper_config", "tiny_config", "PRESETS",
    "BandSplitFrontend", "SeparatorModel", "SharedEncoder", "Decoder", "Encoded",
]
