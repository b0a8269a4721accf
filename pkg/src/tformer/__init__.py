"""TFormer: pooling token mixer + partially connected shuffled FFN, with cost and payload accounting."""

from .config import (
    NLModuleConfig,
    PatchEmbedConfig,
    PCSFFNConfig,
    StageSpec,
    TFormerConfig,
    partition_channels,
    variant_config,
)
from .cost import CostReport, MHACostSpec, ffn_cost, hybrid_cost, mha_cost, model_cost, ratios
from .model import TFormerModel, build_model, build_variant
from .rng import Rng

__version__ = "0.1.0"
