"""Phrase-image matching: a cross-modal transformer, two baselines and their tooling."""

from .baselines import DualEncoder, EarlyFusionMatcher, build_model
from .model import CrossModalMatcher, ModelConfig, rank_pool, score

__all__ = ["CrossModalMatcher", "DualEncoder", "EarlyFusionMatcher", "ModelConfig", "build_model", "rank_pool", "score"]
__version__ = "0.1.0"
