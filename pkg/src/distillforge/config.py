"""Run configuration and the shipped reference configs."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .compress import STRATEGIES, CompressionSpec
from .distill import LossWeights
from .unet import UNetConfig

CONFIG_DIR = resources.files("distillforge") / "configs"


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in CONFIG_DIR.iterdir() if p.name.endswith(".json"))


def _read(ref: str | Path) -> str:
    p = Path(ref)
    if p.exists():
        return p.read_text()
    name = str(ref)
    name = name[:-5] if name.endswith(".json") else name
    shipped = CONFIG_DIR / f"{name}.json"
    if shipped.is_file():
        return shipped.read_text()
    raise FileNotFoundError(f"no config file or shipped config named {ref!r}")


def load_unet_config(ref: str | Path) -> UNetConfig:
    """Load a U-Net config from a path or a shipped name such as ``sdxl-unet``."""
    return UNetConfig.model_validate_json(_read(ref))


def load_compression_spec(ref: str | Path) -> CompressionSpec:
    return CompressionSpec.model_validate_json(_read(ref))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleSettings(_Strict):
    T: int = Field(100, ge=2)
    beta_start: float = 1e-3
    beta_end: float = 0.2


class TrainSettings(_Strict):
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    seed: int = 0
    cfg_drop_prob: float = Field(0.1, ge=0, le=1)
    checkpoint_every: int = Field(0, ge=0)
    layer_strategy: str = "SA-bottom"
    feat_joint_norm: bool = False

    @field_validator("layer_strategy")
    @classmethod
    def _strategy(cls, v):
        if v not in STRATEGIES:
            raise ValueError(f"layer_strategy must be one of {STRATEGIES}")
        return v


class DataSettings(_Strict):
    n: int = Field(720, ge=1)
    H: int = Field(32, ge=16)
    W: int = Field(32, ge=16)
    seed: int = 0


class SamplerSettings(_Strict):
    steps: int = Field(25, ge=1)
    cfg_scale: float = Field(3.5, ge=0)
    seed: int = 0


class RunConfig(_Strict):
    unet: str | UNetConfig = "toy-teacher"
    compression: CompressionSpec | None = None
    recipe: str = "koala-default"
    schedule: ScheduleSettings = ScheduleSettings()
    train: TrainSettings = TrainSettings()
    loss_weights: LossWeights = LossWeights()
    data: DataSettings = DataSettings()
    sampler: SamplerSettings = SamplerSettings()

    def resolved_unet(self) -> UNetConfig:
        return self.unet if isinstance(self.unet, UNetConfig) else load_unet_config(self.unet)

    def resolved(self) -> "RunConfig":
        """Copy with the U-Net reference replaced by its inline config."""
        return self.model_copy(update={"unet": self.resolved_unet()})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)

    @classmethod
    def load(cls, ref: str | Path) -> "RunConfig":
        return cls.model_validate_json(_read(ref))
