"""Training objectives and the teacher/student training loops.

The student objective is ``w_task * L_task + w_out * L_outKD + w_feat * L_featKD``.
All three terms use the mean-squared convention; the feature term sums the
per-pair MSEs over the match plan.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .checkpoint import Denoiser, save_checkpoint
from .compress import MatchPlan
from .data import VOCAB, ShapeSample, stack_batch
from .diffusion import DiffusionSchedule, q_sample
from .unet import TapRecord

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "l_task", "l_out", "l_feat", "total")


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    w_task: float = Field(1.0, ge=0)
    w_out: float = Field(1.0, ge=0)
    w_feat: float = Field(1.0, ge=0)
    # keyed by the student tap, e.g. "MID:SA@3"
    per_pair_overrides: dict[str, float] = Field(default_factory=dict)

    def pair_weight(self, student_tap) -> float:
        w = self.per_pair_overrides.get(str(student_tap), 1.0)
        if w < 0:
            raise ValueError(f"negative weight for pair {student_tap}")
        return w


class NonFiniteLossError(RuntimeError):
    pass


def task_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    if eps_pred.shape != eps_true.shape:
        raise ValueError(f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    return F.mse_loss(eps_pred, eps_true)


def out_kd_loss(eps_teacher: torch.Tensor, eps_student: torch.Tensor) -> torch.Tensor:
    return task_loss(eps_student, eps_teacher.detach())


def feat_kd_loss(
    records_teacher: list[TapRecord],
    records_student: list[TapRecord],
    plan: MatchPlan,
    weights: LossWeights | None = None,
    joint: bool = False,
) -> torch.Tensor:
    """Weighted sum over plan pairs of MSE(student feature, teacher feature).

    With ``joint=True`` all pair differences are pooled into one squared norm
    normalised by the total element count instead.
    """
    weights = weights or LossWeights()
    by_teacher = {r.spec: r for r in records_teacher}
    by_student = {r.spec: r for r in records_student}
    terms, sq_sums, count = [], [], 0
    for s_tap, t_tap in plan.pairs:
        if s_tap not in by_student or t_tap not in by_teacher:
            raise KeyError(f"missing record for plan pair {s_tap} -> {t_tap}")
        fs, ft = by_student[s_tap].tensor, by_teacher[t_tap].tensor.detach()
        if fs.shape != ft.shape:
            raise ValueError(f"pair {s_tap} -> {t_tap}: shapes {tuple(fs.shape)} vs {tuple(ft.shape)}")
        w = weights.pair_weight(s_tap)
        if joint:
            sq_sums.append(w * (fs - ft).pow(2).sum())
            count += fs.numel()
        else:
            terms.append(w * F.mse_loss(fs, ft))
    if joint:
        if not sq_sums:
            return torch.zeros(())
        return torch.stack(sq_sums).sum() / count
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


@dataclass
class TrainState:
    step: int = 0
    rng: torch.Generator = field(default_factory=torch.Generator)
    running: dict[str, float] = field(default_factory=lambda: {k: 0.0 for k in METRIC_FIELDS[1:]})
    history: list[dict] = field(default_factory=list)

    def update_running(self, metrics: dict, decay: float = 0.98) -> None:
        for k in self.running:
            prev = self.running[k] if self.step > 1 else metrics[k]
            self.running[k] = decay * prev + (1 - decay) * metrics[k]


def make_optimizer(model: Denoiser, lr: float = 1e-3, weight_decay: float = 0.01) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay, foreach=True)


def sample_batch(images: torch.Tensor, tokens: torch.Tensor, batch_size: int, gen: torch.Generator):
    idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
    return images[idx], tokens[idx]


def distill_step(
    teacher: Denoiser | None,
    student: Denoiser,
    batch: tuple[torch.Tensor, torch.Tensor],
    schedule: DiffusionSchedule,
    plan: MatchPlan | None,
    weights: LossWeights,
    cfg_drop_prob: float,
    optimizer: torch.optim.Optimizer | None,
    gen: torch.Generator,
    joint_feat: bool = False,
) -> dict[str, float]:
    """One update of the student. With ``teacher=None`` only the task term is computed."""
    x0, tokens = batch
    b = x0.shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    drop = torch.rand(b, generator=gen) < cfg_drop_prob
    tokens = torch.where(drop[:, None], torch.full_like(tokens, VOCAB.null_id), tokens)
    z_t = q_sample(x0, t, eps, schedule)

    s_taps = plan.student_taps() if (plan is not None and teacher is not None) else []
    eps_s, rec_s = student.predict(z_t, t, tokens, s_taps)
    l_task = task_loss(eps_s, eps)
    zero = torch.zeros((), dtype=eps_s.dtype)
    l_out, l_feat = zero, zero
    if teacher is not None:
        with torch.no_grad():
            eps_t, rec_t = teacher.predict(z_t, t, tokens, plan.teacher_taps() if plan else [])
        l_out = out_kd_loss(eps_t, eps_s)
        if plan is not None:
            l_feat = feat_kd_loss(rec_t, rec_s, plan, weights, joint_feat)
    total = weights.w_task * l_task + weights.w_out * l_out + weights.w_feat * l_feat
    metrics = {
        "l_task": l_task.item(),
        "l_out": l_out.item(),
        "l_feat": l_feat.item(),
        "total": total.item(),
    }
    if not all(math.isfinite(v) for v in metrics.values()):
        raise NonFiniteLossError(f"non-finite loss: {metrics}")
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
    return metrics


def train(
    student: Denoiser,
    dataset: list[ShapeSample],
    schedule: DiffusionSchedule,
    steps: int,
    optimizer: torch.optim.Optimizer,
    *,
    teacher: Denoiser | None = None,
    plan: MatchPlan | None = None,
    weights: LossWeights | None = None,
    batch_size: int = 16,
    cfg_drop_prob: float = 0.1,
    seed: int = 0,
    joint_feat: bool = False,
    run_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    run_config: dict | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """Run ``steps`` updates; optionally log metrics.csv and checkpoints under ``run_dir``."""
    weights = weights or LossWeights(w_task=1.0, w_out=0.0, w_feat=0.0)
    if state is None:
        state = TrainState(rng=torch.Generator().manual_seed(seed))
    if teacher is not None:
        teacher.requires_grad_(False)
    images, tokens = stack_batch(dataset)
    images = images.to(next(iter(student.parameters())).dtype)

    writer = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
        new = not metrics_path.exists()
        fh = open(metrics_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_FIELDS)
    try:
        for _ in range(steps):
            batch = sample_batch(images, tokens, batch_size, state.rng)
            m = distill_step(teacher, student, batch, schedule, plan, weights, cfg_drop_prob, optimizer, state.rng, joint_feat)
            state.step += 1
            state.update_running(m)
            row = {"step": state.step, **m}
            state.history.append(row)
            if writer is not None:
                writer.writerow([row[k] if k == "step" else repr(row[k]) for k in METRIC_FIELDS])
            if state.step % 100 == 0:
                log.info("step %d total %.5f (task %.5f)", state.step, state.running["total"], state.running["l_task"])
            if run_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoints" / f"step-{state.step}", student, state.step, run_config, optimizer, state.rng)
    finally:
        if writer is not None:
            fh.close()
    if run_dir is not None and steps and (not checkpoint_every or state.step % checkpoint_every):
        save_checkpoint(run_dir / "checkpoints" / f"step-{state.step}", student, state.step, run_config, optimizer, state.rng)
    return state


def train_teacher(
    model: Denoiser,
    dataset: list[ShapeSample],
    schedule: DiffusionSchedule,
    steps: int,
    optimizer: torch.optim.Optimizer,
    **kwargs,
) -> Denoiser:
    """Plain denoising training (task loss only)."""
    kwargs.pop("teacher", None)
    kwargs.pop("plan", None)
    train(model, dataset, schedule, steps, optimizer, weights=LossWeights(w_task=1, w_out=0, w_feat=0), **kwargs)
    return model


@torch.no_grad()
def heldout_task_loss(
    model: Denoiser,
    dataset: list[ShapeSample],
    schedule: DiffusionSchedule,
    draws: int = 4,
    seed: int = 1234,
    batch_size: int = 64,
) -> float:
    """Mean epsilon-prediction MSE over ``draws`` seeded (t, eps) draws per held-out sample."""
    images, tokens = stack_batch(dataset)
    images = images.to(next(iter(model.parameters())).dtype)
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(draws):
        t_all = torch.randint(0, schedule.T, (images.shape[0],), generator=gen)
        eps_all = torch.randn(images.shape, generator=gen, dtype=images.dtype)
        for i in range(0, images.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            z = q_sample(images[sl], t_all[sl], eps_all[sl], schedule)
            pred, _ = model.predict(z, t_all[sl], tokens[sl])
            total += F.mse_loss(pred, eps_all[sl], reduction="sum").item()
            count += pred.numel()
    return total / count
