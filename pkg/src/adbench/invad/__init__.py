from .pipeline import (
    ConvParams,
    DivergenceError,
    InvadState,
    PipelineConfig,
    anomaly_map,
    backward_and_step,
    build_state,
    conv2d,
    deconv_k3s2,
    grad_check,
    instance_stats,
    loss_mse,
    pipeline_forward,
    ssm_apply,
    stage_distance_maps,
)
from .toy import make_toy_dataset, toy_train_detect

__all__ = [
    "ConvParams",
    "DivergenceError",
    "InvadState",
    "PipelineConfig",
    "anomaly_map",
    "backward_and_step",
    "build_state",
    "conv2d",
    "deconv_k3s2",
    "grad_check",
    "instance_stats",
    "loss_mse",
    "make_toy_dataset",
    "pipeline_forward",
    "ssm_apply",
    "stage_distance_maps",
    "toy_train_detect",
]
