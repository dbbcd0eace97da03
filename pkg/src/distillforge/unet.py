"""Staged text-conditioned denoising U-Net with feature taps.

The topology follows the SDXL layout: three resolution levels, each encoder
stage (DW-1..3) and decoder stage (UP-1..3) holding alternating
(residual block, transformer stack) pairs, an optional bottleneck (MID), and
channel-concatenating skip connections between matching resolutions.

Any intermediate activation can be captured during ``forward`` by passing
``FeatureTapSpec`` values; the forward output is unaffected by tapping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn

NORM_EPS = 1e-5
MAX_NORM_GROUPS = 32

STAGES = ("DW-1", "DW-2", "DW-3", "MID", "UP-1", "UP-2", "UP-3")
# resolution level of each stage; 0 is the full-resolution level
STAGE_LEVEL = {"DW-1": 0, "DW-2": 1, "DW-3": 2, "MID": 2, "UP-1": 2, "UP-2": 1, "UP-3": 0}
STAGE_MODULE = {s: s.lower().replace("-", "") for s in STAGES}

TAP_KINDS = ("SA", "CA", "FFN", "Res", "LF", "TX")
TX_KINDS = ("SA", "CA", "FFN", "TX")


def _json_text(source: str | Path) -> str:
    """JSON text given either the text itself or a path to it."""
    if isinstance(source, str) and source.lstrip().startswith(("{", "[")):
        return source
    return Path(source).read_text()


class UNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, int, int] = (1, 2, 4)
    tx_depths: tuple[int, int, int] = (0, 2, 4)
    tx_pairs_encoder: int = 2
    tx_pairs_decoder: int = 3
    mid_enabled: bool = True
    mid_tx_depth: int = 4
    head_dim: int = 16
    context_dim: int = 32
    time_embed_dim: int = 128

    @model_validator(mode="after")
    def _check(self) -> "UNetConfig":
        if self.tx_pairs_encoder < 1 or self.tx_pairs_decoder < 1:
            raise ValueError("tx_pairs_encoder and tx_pairs_decoder must be >= 1")
        if min(self.channel_mults) < 1 or self.base_channels < 1:
            raise ValueError("channel widths must be positive")
        if min(self.tx_depths) < 0 or self.mid_tx_depth < 0:
            raise ValueError("transformer depths must be non-negative")
        if self.time_embed_dim % 4 or self.time_embed_dim < 8:
            raise ValueError("time_embed_dim must be a multiple of 4 and >= 8")
        for stage in STAGES:
            if stage == "MID" and not self.mid_enabled:
                continue
            depth = self.stage_depth(stage)
            width = self.level_channels(STAGE_LEVEL[stage])
            if depth and (self.head_dim < 1 or width % self.head_dim):
                raise ValueError(
                    f"stage {stage}: {width} channels not divisible by head_dim {self.head_dim}"
                )
        return self

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level]

    def stage_depth(self, stage: str) -> int:
        if stage == "MID":
            return self.mid_tx_depth
        return self.tx_depths[STAGE_LEVEL[stage]]

    def stage_pairs(self, stage: str) -> int:
        if stage == "MID":
            return 1
        return self.tx_pairs_encoder if stage.startswith("DW") else self.tx_pairs_decoder

    def stages(self) -> list[str]:
        return [s for s in STAGES if s != "MID" or self.mid_enabled]

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.model_dump(mode="json"), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "UNetConfig":
        text = _json_text(source)
        return cls.model_validate_json(text)


@dataclass(frozen=True)
class FeatureTapSpec:
    """Where to capture an activation.

    ``block_index`` is 1-based. For transformer kinds (SA, CA, FFN, TX) it counts
    transformer layers across all stacks of the stage in order, so pair ``p``
    (0-based) with depth ``d`` owns indices ``p*d+1 .. p*d+d``. For ``Res`` it is
    the residual block's position in the stage. ``LF`` uses 0.
    ``TX`` is the full transformer layer output (after all residual additions).
    """

    stage: str
    block_index: int
    kind: str

    def to_dict(self) -> dict:
        return {"stage": self.stage, "block_index": self.block_index, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureTapSpec":
        return cls(d["stage"], int(d["block_index"]), d["kind"])

    def __str__(self) -> str:
        return f"{self.stage}:{self.kind}@{self.block_index}"


@dataclass
class TapRecord:
    spec: FeatureTapSpec
    tensor: torch.Tensor
    attn_probs: torch.Tensor | None = None


class TapError(ValueError):
    pass


def _groups(channels: int) -> int:
    # at least two channels per group: with one channel per group the norm
    # would cancel the per-channel timestep shift added inside ResBlock
    return math.gcd(MAX_NORM_GROUPS, max(channels // 2, 1))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _Recorder:
    def __init__(self, taps: Sequence[FeatureTapSpec], capture_attn: bool):
        self.taps = list(taps)
        self.wanted = {(s.stage, s.block_index, s.kind) for s in self.taps}
        self.capture_attn = capture_attn
        self.store: dict[tuple, tuple[torch.Tensor, torch.Tensor | None]] = {}

    def wants_probs(self, stage: str, index: int) -> bool:
        return self.capture_attn and (stage, index, "SA") in self.wanted

    def hit(self, stage: str, index: int, kind: str, tensor: torch.Tensor, attn=None) -> None:
        key = (stage, index, kind)
        if key in self.wanted:
            self.store[key] = (tensor, attn if self.capture_attn else None)

    def records(self) -> list[TapRecord]:
        out = []
        for s in self.taps:
            tensor, attn = self.store[(s.stage, s.block_index, s.kind)]
            out.append(TapRecord(s, tensor, attn))
        return out


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch, eps=NORM_EPS)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch, eps=NORM_EPS)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return skip + h


class Attention(nn.Module):
    def __init__(self, dim: int, head_dim: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = dim // head_dim
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(kv_dim, dim, bias=False)
        self.v = nn.Linear(kv_dim, dim, bias=False)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, want_probs: bool = False):
        context = x if context is None else context
        b, n, c = x.shape
        h = self.heads
        q = self.q(x).reshape(b, n, h, c // h).transpose(1, 2)
        k = self.k(context).reshape(b, context.shape[1], h, c // h).transpose(1, 2)
        v = self.v(context).reshape(b, context.shape[1], h, c // h).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        probs = None
        if want_probs:
            # side computation only; the output path stays identical with or without capture
            probs = (q @ k.transpose(-1, -2) / math.sqrt(c // h)).softmax(dim=-1)
        return self.out_proj(out.transpose(1, 2).reshape(b, n, c)), probs


class GEGLU(nn.Module):
    """Gated-GELU feed-forward with 4x inner width."""

    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.proj_in = nn.Linear(dim, 2 * mult * dim)
        self.proj_out = nn.Linear(mult * dim, dim)

    def forward(self, x):
        a, gate = self.proj_in(x).chunk(2, dim=-1)
        return self.proj_out(a * F.gelu(gate))


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, head_dim: int, context_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=NORM_EPS)
        self.sa = Attention(dim, head_dim)
        self.norm2 = nn.LayerNorm(dim, eps=NORM_EPS)
        self.ca = Attention(dim, head_dim, context_dim)
        self.norm3 = nn.LayerNorm(dim, eps=NORM_EPS)
        self.ffn = GEGLU(dim)

    def forward(self, x, ctx, tap, want_probs=False):
        sa, probs = self.sa(self.norm1(x), want_probs=want_probs)
        tap("SA", sa, probs)
        x = x + sa
        ca, _ = self.ca(self.norm2(x), ctx)
        tap("CA", ca, None)
        x = x + ca
        ff = self.ffn(self.norm3(x))
        tap("FFN", ff, None)
        x = x + ff
        tap("TX", x, None)
        return x


class TransformerStack(nn.Module):
    def __init__(self, dim: int, depth: int, head_dim: int, context_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(dim), dim, eps=NORM_EPS)
        self.proj_in = nn.Linear(dim, dim)
        self.layers = nn.ModuleList(
            TransformerLayer(dim, head_dim, context_dim) for _ in range(depth)
        )
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x, ctx, rec: _Recorder | None, stage: str, offset: int):
        b, c, hgt, wid = x.shape
        h = self.norm(x).reshape(b, c, hgt * wid).transpose(1, 2)
        h = self.proj_in(h)
        for i, layer in enumerate(self.layers):
            index = offset + i + 1

            def tap(kind, tensor, attn, index=index):
                if rec is not None:
                    rec.hit(stage, index, kind, tensor, attn)

            h = layer(h, ctx, tap, rec is not None and rec.wants_probs(stage, index))
        h = self.proj_out(h).transpose(1, 2).reshape(b, c, hgt, wid)
        return x + h


class Stage(nn.Module):
    """A DW/UP stage: alternating (ResBlock, TransformerStack) pairs plus an optional resampler."""

    def __init__(self, in_chs: list[int], out_ch: int, depth: int, cfg: UNetConfig, resample: str | None):
        super().__init__()
        self.depth = depth
        self.res = nn.ModuleList(ResBlock(c, out_ch, cfg.time_embed_dim) for c in in_chs)
        if depth:
            self.tx = nn.ModuleList(
                TransformerStack(out_ch, depth, cfg.head_dim, cfg.context_dim) for _ in in_chs
            )
        else:
            self.tx = None
        if resample == "down":
            self.down = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1)
        elif resample == "up":
            self.up = nn.Conv2d(out_ch, out_ch, 3, padding=1)


class MidStage(nn.Module):
    def __init__(self, ch: int, cfg: UNetConfig):
        super().__init__()
        self.depth = cfg.mid_tx_depth
        self.res = nn.ModuleList(ResBlock(ch, ch, cfg.time_embed_dim) for _ in range(2))
        if self.depth:
            self.tx = nn.ModuleList([TransformerStack(ch, self.depth, cfg.head_dim, cfg.context_dim)])
        else:
            self.tx = None


def skip_channels(cfg: UNetConfig) -> dict[int, list[int]]:
    """Channel widths pushed onto the skip stack at each level, in push order."""
    skips: dict[int, list[int]] = {0: [cfg.base_channels]}
    for level in range(3):
        c = cfg.level_channels(level)
        skips[level].extend([c] * cfg.tx_pairs_encoder)
        if level < 2:
            skips[level + 1] = [c]
    return skips


def decoder_in_channels(cfg: UNetConfig, level: int, prev: int) -> list[int]:
    """Input widths of the residual blocks of the decoder stage at ``level``."""
    popped = skip_channels(cfg)[level][::-1]
    out = cfg.level_channels(level)
    ins = []
    for j in range(cfg.tx_pairs_decoder):
        ins.append(prev + (popped[j] if j < len(popped) else 0))
        prev = out
    return ins


class UNet(nn.Module):
    def __init__(self, config: UNetConfig, num_timesteps: int = 1000):
        super().__init__()
        self.config = config
        self.num_timesteps = num_timesteps
        cfg = config
        temb = cfg.time_embed_dim
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.time_embed = nn.Sequential(nn.Linear(temb // 4, temb), nn.SiLU(), nn.Linear(temb, temb))

        prev = cfg.base_channels
        for level, stage in enumerate(("DW-1", "DW-2", "DW-3")):
            c = cfg.level_channels(level)
            ins = [prev] + [c] * (cfg.tx_pairs_encoder - 1)
            mod = Stage(ins, c, cfg.tx_depths[level], cfg, "down" if level < 2 else None)
            self.add_module(STAGE_MODULE[stage], mod)
            prev = c
        if cfg.mid_enabled:
            self.mid = MidStage(prev, cfg)
        for stage in ("UP-1", "UP-2", "UP-3"):
            level = STAGE_LEVEL[stage]
            c = cfg.level_channels(level)
            ins = decoder_in_channels(cfg, level, prev)
            mod = Stage(ins, c, cfg.tx_depths[level], cfg, "up" if level > 0 else None)
            self.add_module(STAGE_MODULE[stage], mod)
            prev = c
        self.norm_out = nn.GroupNorm(_groups(prev), prev, eps=NORM_EPS)
        self.conv_out = nn.Conv2d(prev, cfg.out_channels, 3, padding=1)

    def stage_module(self, stage: str) -> nn.Module:
        return getattr(self, STAGE_MODULE[stage])

    def available_taps(self) -> list[FeatureTapSpec]:
        cfg = self.config
        taps = []
        for stage in cfg.stages():
            depth = cfg.stage_depth(stage)
            n_res = 2 if stage == "MID" else cfg.stage_pairs(stage)
            n_layers = depth * (1 if stage == "MID" else cfg.stage_pairs(stage))
            for i in range(1, n_layers + 1):
                taps.extend(FeatureTapSpec(stage, i, k) for k in TX_KINDS)
            taps.extend(FeatureTapSpec(stage, i, "Res") for i in range(1, n_res + 1))
            taps.append(FeatureTapSpec(stage, 0, "LF"))
        return taps

    def validate_taps(self, taps: Iterable[FeatureTapSpec]) -> None:
        valid = set(self.available_taps())
        for spec in taps:
            if spec.kind not in TAP_KINDS:
                raise TapError(f"invalid tap {spec}: unknown kind {spec.kind!r}")
            if spec not in valid:
                raise TapError(f"invalid tap {spec} for this model")

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        ctx: torch.Tensor,
        taps: Sequence[FeatureTapSpec] = (),
        capture_attn: bool = False,
    ) -> tuple[torch.Tensor, list[TapRecord]]:
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.num_timesteps):
            raise ValueError(f"timestep out of range [0, {self.num_timesteps})")
        rec = None
        if taps:
            self.validate_taps(taps)
            rec = _Recorder(taps, capture_attn)

        cfg = self.config
        emb = timestep_embedding(t, cfg.time_embed_dim // 4).to(x.dtype)
        emb = self.time_embed(emb)

        h = self.conv_in(x)
        skips = {0: [h]}
        for level, stage in enumerate(("DW-1", "DW-2", "DW-3")):
            mod = self.stage_module(stage)
            for j, res in enumerate(mod.res):
                h = self._pair(mod, j, h, emb, ctx, rec, stage)
                skips[level].append(h)
            if rec is not None:
                rec.hit(stage, 0, "LF", h)
            if level < 2:
                h = mod.down(h)
                skips[level + 1] = [h]

        if cfg.mid_enabled:
            mid = self.mid
            h = mid.res[0](h, emb)
            if rec is not None:
                rec.hit("MID", 1, "Res", h)
            if mid.tx is not None:
                h = mid.tx[0](h, ctx, rec, "MID", 0)
            h = mid.res[1](h, emb)
            if rec is not None:
                rec.hit("MID", 2, "Res", h)
                rec.hit("MID", 0, "LF", h)

        for stage in ("UP-1", "UP-2", "UP-3"):
            level = STAGE_LEVEL[stage]
            mod = self.stage_module(stage)
            popped = skips[level][::-1]
            for j in range(len(mod.res)):
                if j < len(popped):
                    h = torch.cat([h, popped[j]], dim=1)
                h = self._pair(mod, j, h, emb, ctx, rec, stage)
            if rec is not None:
                rec.hit(stage, 0, "LF", h)
            if level > 0:
                h = mod.up(F.interpolate(h, scale_factor=2.0, mode="nearest"))

        out = self.conv_out(F.silu(self.norm_out(h)))
        return out, (rec.records() if rec is not None else [])

    @staticmethod
    def _pair(mod: Stage, j: int, h, emb, ctx, rec, stage):
        h = mod.res[j](h, emb)
        if rec is not None:
            rec.hit(stage, j + 1, "Res", h)
        if mod.tx is not None:
            h = mod.tx[j](h, ctx, rec, stage, j * mod.depth)
        return h


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic init in canonical parameter order, independent of global RNG."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if p.ndim == 1:
                if ".norm" in name or name.startswith("norm"):
                    p.fill_(1.0 if leaf == "weight" else 0.0)
                else:
                    p.zero_()
                continue
            fan_in = p[0].numel()
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64)
            p.copy_((noise / math.sqrt(fan_in)).to(p.dtype))


def build_unet(
    config: UNetConfig, seed: int = 0, num_timesteps: int = 1000, dtype: torch.dtype = torch.float32
) -> UNet:
    model = UNet(config, num_timesteps)
    init_parameters(model, seed)
    return model.to(dtype)


def forward(model: UNet, z_t, t, ctx, taps: Sequence[FeatureTapSpec] = (), capture_attn: bool = False):
    return model(z_t, t, ctx, taps, capture_attn)


# ---------------------------------------------------------------------------
# symbolic parameter counting


@dataclass
class ParamBudget:
    """Parameter totals broken down by stage and block kind.

    Stem parameters (input conv, timestep MLP) are booked as DW-1 "other";
    the output head (final norm and conv) as UP-3 "other".
    """

    total: int
    per_stage: dict[str, dict[str, int]]

    @property
    def fractions(self) -> dict[str, dict[str, float]]:
        return {
            s: {k: v / self.total for k, v in parts.items()} for s, parts in self.per_stage.items()
        }

    def to_dict(self) -> dict:
        return {"total": self.total, "per_stage": self.per_stage, "fractions": self.fractions}


def _conv(i: int, o: int, k: int) -> int:
    return i * o * k * k + o


def _linear(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def _res_params(i: int, o: int, temb: int) -> int:
    n = 2 * i + _conv(i, o, 3) + _linear(temb, o) + 2 * o + _conv(o, o, 3)
    if i != o:
        n += _conv(i, o, 1)
    return n


def _tx_params(c: int, depth: int, ctx: int) -> int:
    if depth == 0:
        return 0
    sa = 3 * c * c + _linear(c, c)
    ca = c * c + 2 * ctx * c + _linear(c, c)
    ffn = _linear(c, 8 * c) + _linear(4 * c, c)
    layer = 3 * 2 * c + sa + ca + ffn
    return 2 * c + 2 * _linear(c, c) + depth * layer


def count_params(config: UNetConfig) -> ParamBudget:
    """Count parameters from the config alone, without instantiating the model."""
    cfg = config
    temb = cfg.time_embed_dim
    ctx = cfg.context_dim
    per = {s: {"res": 0, "tx": 0, "other": 0} for s in cfg.stages()}
    per["DW-1"]["other"] += _conv(cfg.in_channels, cfg.base_channels, 3)
    per["DW-1"]["other"] += _linear(temb // 4, temb) + _linear(temb, temb)

    prev = cfg.base_channels
    for level, stage in enumerate(("DW-1", "DW-2", "DW-3")):
        c = cfg.level_channels(level)
        for j in range(cfg.tx_pairs_encoder):
            per[stage]["res"] += _res_params(prev if j == 0 else c, c, temb)
            per[stage]["tx"] += _tx_params(c, cfg.tx_depths[level], ctx)
        if level < 2:
            per[stage]["other"] += _conv(c, c, 3)
        prev = c
    if cfg.mid_enabled:
        per["MID"]["res"] += 2 * _res_params(prev, prev, temb)
        per["MID"]["tx"] += _tx_params(prev, cfg.mid_tx_depth, ctx)
    for stage in ("UP-1", "UP-2", "UP-3"):
        level = STAGE_LEVEL[stage]
        c = cfg.level_channels(level)
        for i in decoder_in_channels(cfg, level, prev):
            per[stage]["res"] += _res_params(i, c, temb)
            per[stage]["tx"] += _tx_params(c, cfg.tx_depths[level], ctx)
        if level > 0:
            per[stage]["other"] += _conv(c, c, 3)
        prev = c
    per["UP-3"]["other"] += 2 * prev + _conv(prev, cfg.out_channels, 3)
    total = sum(sum(v.values()) for v in per.values())
    return ParamBudget(total, per)


def instantiated_param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
