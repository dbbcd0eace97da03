"""Portable checkpoints: ``manifest.json`` + ``weights.bin`` per checkpoint directory,
with optimizer moments and RNG state in a ``state/`` subdirectory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import torch

from .data import CaptionEmbedder
from .storage import read_tensors, write_tensors
from .unet import FeatureTapSpec, UNet, UNetConfig, build_unet


@dataclass
class Denoiser:
    """A U-Net plus its caption embedder; the unit that is trained and checkpointed."""

    unet: UNet
    text: CaptionEmbedder

    @classmethod
    def build(cls, config: UNetConfig, seed: int = 0, num_timesteps: int = 1000, dtype=torch.float32) -> "Denoiser":
        unet = build_unet(config, seed, num_timesteps, dtype)
        text = CaptionEmbedder(config.context_dim, seed=seed + 1).to(dtype)
        return cls(unet, text)

    @property
    def config(self) -> UNetConfig:
        return self.unet.config

    def named_parameters(self) -> Iterator[tuple[str, torch.nn.Parameter]]:
        yield from self.unet.named_parameters()
        for name, p in self.text.named_parameters():
            yield f"text.{name}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag: bool) -> "Denoiser":
        self.unet.requires_grad_(flag)
        self.text.requires_grad_(flag)
        return self

    def predict(self, z_t, t, tokens, taps: tuple[FeatureTapSpec, ...] | list = (), capture_attn: bool = False):
        ctx = self.text(tokens)
        return self.unet(z_t, t, ctx, taps, capture_attn)

    def eps_fn(self):
        """Adapter ``(z_t, t, tokens) -> eps`` for the sampler."""
        return lambda z, t, tokens: self.predict(z, t, tokens)[0]


def save_checkpoint(
    path: str | Path,
    model: Denoiser,
    step: int = 0,
    config: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    rng: torch.Generator | None = None,
) -> Path:
    path = Path(path)
    header = {
        "step": step,
        "config": {"unet": model.config.model_dump(mode="json"), "num_timesteps": model.unet.num_timesteps, **(config or {})},
    }
    params = [({"name": n}, p) for n, p in model.named_parameters()]
    write_tensors(path, params, header, data_name="weights.bin", entries_key="parameters")
    if optimizer is not None or rng is not None:
        write_tensors(path / "state", _state_items(model, optimizer, rng), {"step": step})
    return path


def _state_items(model: Denoiser, optimizer, rng):
    if optimizer is not None:
        state = optimizer.state
        for name, p in model.named_parameters():
            for key, value in sorted(state.get(p, {}).items()):
                yield {"name": f"{name}/{key}"}, torch.as_tensor(value)
    if rng is not None:
        yield {"name": "rng"}, rng.get_state()


def load_checkpoint(path: str | Path) -> tuple[Denoiser, dict]:
    manifest, items = read_tensors(path, data_name="weights.bin", entries_key="parameters")
    cfg = UNetConfig.model_validate(manifest["config"]["unet"])
    dtype = items[0][1].dtype if items else torch.float32
    model = Denoiser.build(cfg, 0, manifest["config"].get("num_timesteps", 1000), dtype)
    params = dict(model.named_parameters())
    if [e["name"] for e, _ in items] != list(params):
        raise ValueError(f"checkpoint {path} parameter list does not match its config")
    with torch.no_grad():
        for e, tensor in items:
            params[e["name"]].copy_(tensor)
    return model, manifest


def load_train_state(path: str | Path, model: Denoiser, optimizer=None, rng: torch.Generator | None = None) -> int:
    """Restore optimizer moments and RNG state saved next to a checkpoint; returns the step."""
    manifest, items = read_tensors(Path(path) / "state")
    params = dict(model.named_parameters())
    for e, tensor in items:
        if e["name"] == "rng":
            if rng is not None:
                rng.set_state(tensor)
            continue
        pname, key = e["name"].rsplit("/", 1)
        if optimizer is not None:
            optimizer.state[params[pname]][key] = tensor
    return int(manifest["step"])
