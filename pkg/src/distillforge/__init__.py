"""U-Net compression and self-attention feature distillation toolkit."""

from .checkpoint import Denoiser, load_checkpoint, save_checkpoint
from .compress import (
    CompressionError,
    CompressionSpec,
    MatchPlan,
    compress_config,
    inherit_weights,
    plan_feature_match,
    plan_layer_match,
)
from .diffusion import DiffusionSchedule, SamplerConfig, cfg_combine, euler_sample, make_schedule, q_sample
from .distill import LossWeights, distill_step, feat_kd_loss, out_kd_loss, task_loss
from .unet import FeatureTapSpec, ParamBudget, TapRecord, UNet, UNetConfig, build_unet, count_params, forward

__version__ = "0.1.0"

__all__ = [
    "CompressionError",
    "CompressionSpec",
    "Denoiser",
    "DiffusionSchedule",
    "FeatureTapSpec",
    "LossWeights",
    "MatchPlan",
    "ParamBudget",
    "SamplerConfig",
    "TapRecord",
    "UNet",
    "UNetConfig",
    "build_unet",
    "cfg_combine",
    "compress_config",
    "count_params",
    "distill_step",
    "euler_sample",
    "feat_kd_loss",
    "forward",
    "inherit_weights",
    "load_checkpoint",
    "make_schedule",
    "out_kd_loss",
    "plan_feature_match",
    "plan_layer_match",
    "q_sample",
    "save_checkpoint",
    "task_loss",
]
