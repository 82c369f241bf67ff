"""RSS-aware channel refinement network, its losses, and training loop."""

from .network import (
    ModelConfig,
    channel_to_planes,
    cross_attention,
    decode,
    encode,
    forward,
    forward_planes,
    init_params,
    planes_to_channel,
    rss_encoder,
    transformer_latent,
)
from .losses import nmse_loss, phy_loss, total_loss
from .training import (
    AdamState,
    FineTuneResult,
    Sample,
    SampleMeta,
    TrainConfig,
    TrainResult,
    adam_step,
    evaluate_nmse,
    fine_tune,
    init_adam,
    predict_planes,
    train,
)
from .complexity import LayerCost, count_params_flops

__all__ = [
    "ModelConfig",
    "init_params",
    "channel_to_planes",
    "planes_to_channel",
    "rss_encoder",
    "encode",
    "cross_attention",
    "transformer_latent",
    "decode",
    "forward",
    "forward_planes",
    "nmse_loss",
    "phy_loss",
    "total_loss",
    "Sample",
    "SampleMeta",
    "TrainConfig",
    "TrainResult",
    "FineTuneResult",
    "AdamState",
    "init_adam",
    "adam_step",
    "train",
    "fine_tune",
    "predict_planes",
    "evaluate_nmse",
    "LayerCost",
    "count_params_flops",
]
