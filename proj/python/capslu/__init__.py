"""Capsule-network spoken language understanding: features, models, training and experiments."""

from ._core import (
    Checkpoint,
    FeatureConfig,
    ModelConfig,
    SynthConfig,
    TrainConfig,
    count_params,
    dynamic_routing,
    extract_features,
    generate_synthetic,
    gradcheck,
    jsd,
    load_wav,
    lowess,
    split_blocks,
    squash,
    train,
)

__all__ = [
    "Checkpoint",
    "FeatureConfig",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "count_params",
    "dynamic_routing",
    "extract_features",
    "generate_synthetic",
    "gradcheck",
    "jsd",
    "load_wav",
    "lowess",
    "split_blocks",
    "squash",
    "train",
]
