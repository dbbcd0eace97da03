"""Student derivation: block removal, transformer layer-wise removal, teacher
to student feature matching plans, and weight inheritance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from pydantic import BaseModel, ConfigDict

from .unet import STAGES, FeatureTapSpec, UNet, UNetConfig, _json_text

STRATEGIES = ("SA-bottom", "SA-interleave", "SA-up")


class CompressionError(ValueError):
    pass


class CompressionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    remove_encoder_last_pair: bool = True
    remove_decoder_intermediate_pair: bool = True
    target_tx_depths: tuple[int, int, int]
    remove_mid: bool = False
    # bottleneck depth; follows the deepest target level when unset
    target_mid_tx_depth: int | None = None

    @classmethod
    def from_json(cls, source: str | Path) -> "CompressionSpec":
        return cls.model_validate_json(_json_text(source))

    @classmethod
    def identity(cls, teacher: UNetConfig) -> "CompressionSpec":
        return cls(
            remove_encoder_last_pair=False,
            remove_decoder_intermediate_pair=False,
            target_tx_depths=teacher.tx_depths,
            target_mid_tx_depth=teacher.mid_tx_depth,
        )


def decoder_removed_pair(n: int) -> int:
    """0-based index of the intermediate decoder pair removed from ``n`` pairs."""
    if n < 3:
        raise CompressionError(f"decoder stage with {n} pairs has no intermediate pair")
    return (n + 1) // 2 - 1


def compress_config(teacher: UNetConfig, spec: CompressionSpec) -> UNetConfig:
    targets = spec.target_tx_depths
    for level, (t, s) in enumerate(zip(teacher.tx_depths, targets)):
        if s > t:
            raise CompressionError(f"level {level}: target depth {s} exceeds teacher depth {t}")
        if s == 0 and t != 0:
            raise CompressionError(f"level {level}: depth 0 only allowed where the teacher has none")
        if s < 0:
            raise CompressionError(f"level {level}: negative target depth")
    mid_depth = teacher.mid_tx_depth
    if spec.target_mid_tx_depth is not None:
        mid_depth = spec.target_mid_tx_depth
    elif teacher.mid_tx_depth == teacher.tx_depths[2]:
        mid_depth = targets[2]
    if mid_depth > teacher.mid_tx_depth:
        raise CompressionError(f"MID: target depth {mid_depth} exceeds teacher depth {teacher.mid_tx_depth}")

    enc = teacher.tx_pairs_encoder
    if spec.remove_encoder_last_pair:
        if enc < 2:
            raise CompressionError("encoder stages have a single pair; nothing left after removal")
        enc -= 1
    dec = teacher.tx_pairs_decoder
    if spec.remove_decoder_intermediate_pair:
        decoder_removed_pair(dec)
        dec -= 1
    mid_enabled = teacher.mid_enabled and not spec.remove_mid
    return teacher.model_copy(
        update=dict(
            tx_depths=tuple(targets),
            tx_pairs_encoder=enc,
            tx_pairs_decoder=dec,
            mid_enabled=mid_enabled,
            mid_tx_depth=mid_depth,
        )
    )


def plan_layer_match(d_teacher: int, d_student: int, strategy: str = "SA-bottom") -> list[int]:
    """1-based teacher layer indices matched by each student layer, ascending."""
    if not 1 <= d_student <= d_teacher:
        raise CompressionError(f"need 1 <= d_student <= d_teacher, got {d_student}, {d_teacher}")
    if strategy == "SA-bottom":
        return list(range(1, d_student + 1))
    if strategy == "SA-up":
        return list(range(d_teacher - d_student + 1, d_teacher + 1))
    if strategy == "SA-interleave":
        picked = list(range(1, d_teacher + 1, 2))[:d_student]
        for i in range(d_teacher, 0, -1):
            if len(picked) == d_student:
                break
            if i not in picked:
                picked.append(i)
        return sorted(picked)
    raise CompressionError(f"unknown layer-match strategy {strategy!r}")


def pair_map(teacher: UNetConfig, student: UNetConfig, stage: str) -> list[int]:
    """For each surviving student pair in ``stage``, the 0-based teacher pair it came from."""
    if stage == "MID":
        return [0]
    n_t, n_s = teacher.stage_pairs(stage), student.stage_pairs(stage)
    if n_s == n_t:
        return list(range(n_t))
    if stage.startswith("DW"):
        if n_s == n_t - 1:
            return list(range(n_s))
    elif n_s == n_t - 1:
        gone = decoder_removed_pair(n_t)
        return [j for j in range(n_t) if j != gone]
    raise CompressionError(f"stage {stage}: student with {n_s} pairs is not derived from {n_t}")


def check_derived(teacher: UNetConfig, student: UNetConfig) -> None:
    for f in ("in_channels", "out_channels", "base_channels", "channel_mults", "head_dim", "context_dim", "time_embed_dim"):
        if getattr(teacher, f) != getattr(student, f):
            raise CompressionError(f"student {f} differs from teacher; widths must be preserved")
    if student.mid_enabled and not teacher.mid_enabled:
        raise CompressionError("student has a MID block the teacher lacks")
    for stage in student.stages():
        if student.stage_depth(stage) > teacher.stage_depth(stage):
            raise CompressionError(f"stage {stage}: student deeper than teacher")
        pair_map(teacher, student, stage)


def layer_map(teacher: UNetConfig, student: UNetConfig, stage: str, strategy: str) -> dict[int, int]:
    """Student global transformer-layer index -> teacher global index within ``stage``."""
    d_t, d_s = teacher.stage_depth(stage), student.stage_depth(stage)
    if d_s == 0:
        return {}
    inner = plan_layer_match(d_t, d_s, strategy)
    out = {}
    for j, tj in enumerate(pair_map(teacher, student, stage)):
        for k, tk in enumerate(inner):
            out[j * d_s + k + 1] = tj * d_t + tk
    return out


def res_map(teacher: UNetConfig, student: UNetConfig, stage: str) -> dict[int, int]:
    if stage == "MID":
        return {1: 1, 2: 2}
    return {j + 1: tj + 1 for j, tj in enumerate(pair_map(teacher, student, stage))}


# ---------------------------------------------------------------------------
# feature-match plans


@dataclass
class MatchPlan:
    name: str
    pairs: list[tuple[FeatureTapSpec, FeatureTapSpec]]
    strategy: str = "SA-bottom"

    def student_taps(self) -> list[FeatureTapSpec]:
        return [s for s, _ in self.pairs]

    def teacher_taps(self) -> list[FeatureTapSpec]:
        return [t for _, t in self.pairs]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "strategy": self.strategy,
            "pairs": [{"student": s.to_dict(), "teacher": t.to_dict()} for s, t in self.pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchPlan":
        pairs = [(FeatureTapSpec.from_dict(p["student"]), FeatureTapSpec.from_dict(p["teacher"])) for p in d["pairs"]]
        return cls(d["name"], pairs, d.get("strategy", "SA-bottom"))

    @classmethod
    def from_json(cls, source: str | Path) -> "MatchPlan":
        return cls.from_dict(json.loads(_json_text(source)))


# recipe -> (kinds at every stage, extra kinds at DW-1 & UP-3 only)
RECIPES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "koala-default": (("SA",), ("LF",)),
    "sa-only": (("SA",), ()),
    "ca-only": (("CA",), ()),
    "ffn-only": (("FFN",), ()),
    "res-only": (("Res",), ()),
    "lf-only": (("LF",), ()),
    "sa+res-dw1up3": (("SA",), ("Res",)),
    "sa+lf-dw1up3": (("SA",), ("LF",)),
    "sa+lf-all": (("SA", "LF"), ()),
    "sa+res-all": (("SA", "Res"), ()),
    "all-features": (("SA", "CA", "Res", "FFN", "LF"), ()),
}
_TX_KINDS = ("SA", "CA", "FFN")


def _stage_pairs_for_kind(teacher, student, stage, kind, strategy):
    if kind in _TX_KINDS:
        lm = layer_map(teacher, student, stage, strategy)
        return [(FeatureTapSpec(stage, s, kind), FeatureTapSpec(stage, t, kind)) for s, t in lm.items()]
    if kind == "Res":
        return [(FeatureTapSpec(stage, s, kind), FeatureTapSpec(stage, t, kind)) for s, t in res_map(teacher, student, stage).items()]
    if kind == "LF":
        return [(FeatureTapSpec(stage, 0, "LF"), FeatureTapSpec(stage, 0, "LF"))]
    raise CompressionError(f"unsupported feature kind {kind!r}")


def plan_feature_match(
    teacher: UNetConfig, student: UNetConfig, recipe: str = "koala-default", strategy: str = "SA-bottom"
) -> MatchPlan:
    """Pairs of (student tap, teacher tap) over which the feature loss is summed.

    ``stage:<StageId>`` distils self-attention of that one stage only. The other
    recipes are listed in ``RECIPES``; transformer kinds are planned only where the
    student has transformer layers.
    """
    check_derived(teacher, student)
    stages = [s for s in STAGES if s in student.stages()]
    pairs = []
    if recipe.startswith("stage:"):
        stage = recipe.split(":", 1)[1]
        if stage not in stages:
            raise CompressionError(f"stage {stage!r} not present in the student")
        if student.stage_depth(stage) == 0:
            raise CompressionError(f"self-attention features cannot be distilled at stage {stage} (no transformer)")
        pairs = _stage_pairs_for_kind(teacher, student, stage, "SA", strategy)
        return MatchPlan(recipe, pairs, strategy)
    if recipe not in RECIPES:
        raise CompressionError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)} or stage:<StageId>")
    everywhere, edge = RECIPES[recipe]
    for stage in stages:
        kinds = list(everywhere)
        if stage in ("DW-1", "UP-3"):
            kinds += [k for k in edge if k not in kinds]
        for kind in kinds:
            if kind in _TX_KINDS and student.stage_depth(stage) == 0:
                continue
            pairs.extend(_stage_pairs_for_kind(teacher, student, stage, kind, strategy))
    return MatchPlan(recipe, pairs, strategy)


# ---------------------------------------------------------------------------
# weight inheritance


@dataclass
class WeightMap:
    entries: list[tuple[str, str]] = field(default_factory=list)
    unmatched_student: list[str] = field(default_factory=list)


def _teacher_name(name: str, teacher: UNetConfig, student: UNetConfig, strategy: str) -> str | None:
    parts = name.split(".")
    head = parts[0]
    stage = next((s for s in STAGES if s.lower().replace("-", "") == head), None)
    if stage is None:
        return name
    if stage == "MID":
        if len(parts) > 4 and parts[1] == "tx" and parts[3] == "layers":
            k = int(parts[4]) + 1
            inner = plan_layer_match(teacher.mid_tx_depth, student.mid_tx_depth, strategy)
            parts[4] = str(inner[k - 1] - 1)
        return ".".join(parts)
    pm = pair_map(teacher, student, stage)
    if parts[1] in ("res", "tx"):
        j = int(parts[2])
        parts[2] = str(pm[j])
        if parts[1] == "tx" and len(parts) > 4 and parts[3] == "layers":
            inner = plan_layer_match(teacher.stage_depth(stage), student.stage_depth(stage), strategy)
            parts[4] = str(inner[int(parts[4])] - 1)
    return ".".join(parts)


def inherit_weights(teacher: UNet, student: UNet, strategy: str = "SA-bottom") -> WeightMap:
    """Copy every teacher parameter at a surviving structural location into the student.

    Decoder residual input layers whose width changed (different skip concatenation)
    have no counterpart; they keep their fresh initialisation.
    """
    t_cfg, s_cfg = teacher.config, student.config
    check_derived(t_cfg, s_cfg)
    t_params = dict(teacher.named_parameters())
    wmap = WeightMap()
    with torch.no_grad():
        for name, p in student.named_parameters():
            t_name = _teacher_name(name, t_cfg, s_cfg, strategy)
            src = t_params.get(t_name)
            is_input_layer = ".res." in name and name.split(".")[-2] in ("norm1", "conv1", "shortcut")
            if src is None or (src.shape != p.shape and is_input_layer and name.startswith("up")):
                wmap.unmatched_student.append(name)
                continue
            if src.shape != p.shape:
                raise CompressionError(
                    f"shape mismatch: student {name} {tuple(p.shape)} vs teacher {t_name} {tuple(src.shape)}"
                )
            p.copy_(src.to(p.dtype))
            wmap.entries.append((name, t_name))
    return wmap
