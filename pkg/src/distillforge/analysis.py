"""Parameter dissection, cross-layer cosine similarity, PCA of self-attention
maps, and feature dump export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .storage import read_tensors, write_tensors
from .unet import STAGE_LEVEL, FeatureTapSpec, ParamBudget, TapRecord, UNetConfig, count_params

LOWEST_STAGES = ("DW-3", "MID", "UP-1")


def param_distribution(config: UNetConfig) -> ParamBudget:
    return count_params(config)


def lowest_level_tx_share(budget: ParamBudget) -> float:
    """Fraction of all parameters held by transformers at the lowest resolution."""
    tx = sum(budget.per_stage[s]["tx"] for s in LOWEST_STAGES if s in budget.per_stage)
    return tx / budget.total


@dataclass
class SimilarityCurve:
    stage: str | None
    values: list[float]
    x: list[float]
    zero_norm: bool = False


def _cos(a: torch.Tensor, b: torch.Tensor) -> tuple[float, bool]:
    a = a.reshape(-1).to(torch.float64)
    b = b.reshape(-1).to(torch.float64)
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return 0.0, True
    c = float(torch.dot(a, b) / (na * nb))
    return max(-1.0, min(1.0, c)), False


def cross_layer_cosine(
    stage_layer_outputs: Sequence[torch.Tensor], normalize_index: bool = True, stage: str | None = None
) -> SimilarityCurve:
    """Cosine between each layer's output and its predecessor's, per sample, averaged over the batch.

    Outputs are ``[B, ...]`` tensors of one shape. ``x`` holds the layer index
    (2-based) or, when normalised, its position in ``[0, 1]``.
    """
    outs = list(stage_layer_outputs)
    if len(outs) < 2:
        raise ValueError("need at least two layer outputs")
    shape = outs[0].shape
    if any(o.shape != shape for o in outs):
        raise ValueError("layer outputs differ in shape")
    values, degenerate = [], False
    for prev, cur in zip(outs, outs[1:]):
        per = []
        for b in range(shape[0]):
            c, z = _cos(cur[b], prev[b])
            degenerate |= z
            per.append(c)
        values.append(float(np.mean(per)))
    n = len(outs)
    if normalize_index:
        x = [(l - 1) / (n - 1) for l in range(2, n + 1)]
    else:
        x = [float(l) for l in range(2, n + 1)]
    if degenerate:
        warnings.warn("zero-norm layer output; cosine set to 0", RuntimeWarning, stacklevel=2)
    return SimilarityCurve(stage, values, x, degenerate)


@dataclass
class PcaResult:
    components: np.ndarray  # [k, d]
    explained_variance: np.ndarray  # [k]
    projections: np.ndarray  # [n, k]
    mean: np.ndarray = field(default=None)

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = self.total_variance
        return self.explained_variance / total if total > 0 else np.zeros_like(self.explained_variance)

    total_variance: float = 0.0


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for i, row in enumerate(out):
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            out[i] = -row
    return out


def attention_pca(attn_maps, k: int = 3) -> PcaResult:
    """PCA over rows of ``attn_maps`` (``[n, d]``) via SVD of the centred data."""
    data = np.asarray(attn_maps.detach().cpu() if isinstance(attn_maps, torch.Tensor) else attn_maps, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("attn_maps must be 2-D [n, d]")
    n, d = data.shape
    if n < 2 or not 1 <= k <= min(n, d):
        raise ValueError(f"need n >= 2 and 1 <= k <= min(n, d); got n={n}, d={d}, k={k}")
    mean = data.mean(axis=0)
    centred = data - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:k]
    var = np.zeros(k)
    m = min(k, s.size)
    var[:m] = s[:m] ** 2 / (n - 1)
    comps = _fix_signs(comps)
    return PcaResult(comps, var, centred @ comps.T, mean, total_variance=float((s**2).sum() / (n - 1)))


def attention_rows(attn_probs: torch.Tensor) -> np.ndarray:
    """Head-averaged attention rows, one row per (image, query): ``[B*N, N]``."""
    if attn_probs.ndim == 4:
        attn_probs = attn_probs.mean(dim=1)
    return attn_probs.reshape(-1, attn_probs.shape[-1]).detach().cpu().double().numpy()


# ---------------------------------------------------------------------------
# feature dumps


def _dump_name(spec: FeatureTapSpec) -> str:
    return f"{spec.stage}.{spec.kind}.{spec.block_index}"


def export_tap_dump(model, batch, taps: Sequence[FeatureTapSpec], path: str | Path, capture_attn: bool = True) -> Path:
    """Run ``model`` (a Denoiser) on ``batch = (z_t, t, tokens)`` and write the tapped features."""
    z_t, t, tokens = batch
    taps = list(taps)
    with torch.no_grad():
        _, records = model.predict(z_t, t, tokens, taps, capture_attn=capture_attn)
    return write_records(records, path)


def write_records(records: Sequence[TapRecord], path: str | Path) -> Path:
    items = []
    for r in records:
        meta = {"name": _dump_name(r.spec), **r.spec.to_dict()}
        items.append((meta, r.tensor))
        if r.attn_probs is not None:
            items.append(({**meta, "name": meta["name"] + ".attn", "attn": True}, r.attn_probs))
    return write_tensors(path, items)


def load_tap_dump(path: str | Path) -> list[TapRecord]:
    _, items = read_tensors(path)
    records: list[TapRecord] = []
    for meta, tensor in items:
        spec = FeatureTapSpec.from_dict(meta)
        if meta.get("attn"):
            records[-1].attn_probs = tensor
        else:
            records.append(TapRecord(spec, tensor))
    return records


def stage_layer_outputs(records: Sequence[TapRecord]) -> dict[str, list[torch.Tensor]]:
    """Group transformer layer outputs (kind TX) by stage, in layer order."""
    grouped: dict[str, list[tuple[int, torch.Tensor]]] = {}
    for r in records:
        if r.spec.kind == "TX":
            grouped.setdefault(r.spec.stage, []).append((r.spec.block_index, r.tensor))
    return {s: [t for _, t in sorted(v, key=lambda p: p[0])] for s, v in grouped.items()}


def split_stacks(outputs: Sequence[torch.Tensor], depth: int) -> list[list[torch.Tensor]]:
    """Cut a stage's layer outputs (global index order) into stacks of ``depth`` layers."""
    if depth < 1:
        raise ValueError("stack depth must be positive")
    outs = list(outputs)
    return [outs[i : i + depth] for i in range(0, len(outs), depth)]


def analysis_taps(config: UNetConfig, kind: str = "TX") -> list[FeatureTapSpec]:
    """Every transformer layer tap of one kind across the model."""
    taps = []
    for stage in config.stages():
        depth = config.stage_depth(stage)
        pairs = 1 if stage == "MID" else config.stage_pairs(stage)
        taps.extend(FeatureTapSpec(stage, i, kind) for i in range(1, depth * pairs + 1))
    return taps


def first_stack_layers(config: UNetConfig, stage: str) -> range:
    """Global indices of the first transformer stack of a stage (cosine curves use one stack)."""
    return range(1, config.stage_depth(stage) + 1)


# ---------------------------------------------------------------------------
# emitters


def write_budget_csv(budget: ParamBudget, path: str | Path, label: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "stage", "res", "tx", "other", "fraction"])
        for stage, parts in budget.per_stage.items():
            w.writerow([label, stage, parts["res"], parts["tx"], parts["other"], repr(sum(parts.values()) / budget.total)])
        w.writerow([label, "TOTAL", "", "", "", repr(1.0)])


def write_curves_csv(curves: Sequence[SimilarityCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "layer_x", "cosine"])
        for c in curves:
            for x, v in zip(c.x, c.values):
                w.writerow([c.stage, repr(x), repr(v)])


def write_pca_csv(result: PcaResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        k = result.components.shape[0]
        w.writerow(["row"] + [f"pc{i + 1}" for i in range(k)])
        w.writerow(["explained_variance"] + [repr(float(v)) for v in result.explained_variance])
        for i, row in enumerate(result.projections):
            w.writerow([i] + [repr(float(v)) for v in row])


def plot_curves(curves: Sequence[SimilarityCurve], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in curves:
        ax.plot(c.x, c.values, marker="o", label=c.stage)
    ax.set_xlabel("normalized layer index")
    ax.set_ylabel("cosine to previous layer")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_pca_rgb(result: PcaResult, tokens_hw: tuple[int, int], path: str | Path) -> None:
    """Top-3 projections of one image's queries rendered as an RGB map (min-max per channel)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h, w = tokens_hw
    proj = result.projections[: h * w, :3]
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    rgb = (proj - lo) / np.where(hi > lo, hi - lo, 1.0)
    plt.imsave(path, rgb.reshape(h, w, 3))


def level_hw(config: UNetConfig, stage: str, image_hw: tuple[int, int]) -> tuple[int, int]:
    f = 2 ** STAGE_LEVEL[stage]
    return image_hw[0] // f, image_hw[1] // f
