"""Attention-based cross-component chroma intra-prediction."""

from .model import BlockSizeConfig, ModelWeights, init_weights, model_forward
from .data import PatchSample

__version__ = "0.1.0"

__all__ = ["BlockSizeConfig", "ModelWeights", "PatchSample", "init_weights", "model_forward"]
