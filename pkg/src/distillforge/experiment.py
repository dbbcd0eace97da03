"""Toy-scale efficacy experiment: task-only student versus distilled student."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import Denoiser, load_checkpoint, save_checkpoint
from .compress import CompressionSpec, compress_config, inherit_weights, plan_feature_match
from .config import RunConfig
from .data import gen_dataset, stack_batch
from .diffusion import make_schedule, q_sample
from .distill import LossWeights, feat_kd_loss, heldout_task_loss, make_optimizer, out_kd_loss, train, train_teacher

log = logging.getLogger(__name__)

HELDOUT_SEED_OFFSET = 1000


def default_cache_dir() -> Path:
    return Path(os.environ.get("DISTILLFORGE_CACHE", Path.home() / ".cache" / "distillforge"))


def _teacher_key(cfg: RunConfig, steps: int) -> str:
    blob = json.dumps(
        {"unet": cfg.resolved_unet().model_dump(mode="json"), "schedule": cfg.schedule.model_dump(),
         "train": cfg.train.model_dump(), "data": cfg.data.model_dump(), "steps": steps},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def trained_teacher(cfg: RunConfig, steps: int, cache_dir: str | Path | None = None) -> Denoiser:
    """Train the teacher of ``cfg`` for ``steps`` updates, reusing a cached checkpoint if present."""
    path = Path(cache_dir or default_cache_dir()) / f"teacher-{_teacher_key(cfg, steps)}"
    if (path / "manifest.json").exists():
        model, _ = load_checkpoint(path)
        return model
    schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    tr = cfg.train
    model = Denoiser.build(cfg.resolved_unet(), tr.seed, schedule.T)
    dataset = gen_dataset(cfg.data.n, cfg.data.H, cfg.data.W, cfg.data.seed)
    opt = make_optimizer(model, tr.lr, tr.weight_decay)
    train_teacher(model, dataset, schedule, steps, opt, batch_size=tr.batch_size, cfg_drop_prob=tr.cfg_drop_prob, seed=tr.seed)
    save_checkpoint(path, model, steps, {"schedule": cfg.schedule.model_dump(), "run": cfg.model_dump(mode="json")})
    return model


def make_student(teacher: Denoiser, spec: CompressionSpec, seed: int, strategy: str = "SA-bottom") -> Denoiser:
    """Compressed student with weights inherited from ``teacher`` (caption embedder copied)."""
    student = Denoiser.build(compress_config(teacher.config, spec), seed, teacher.unet.num_timesteps)
    inherit_weights(teacher.unet, student.unet, strategy)
    student.text.load_state_dict(teacher.text.state_dict())
    return student


@dataclass
class EfficacyResult:
    teacher_heldout: float
    task_only: list[float] = field(default_factory=list)
    distilled: list[float] = field(default_factory=list)

    @property
    def wins(self) -> int:
        return sum(d < t for d, t in zip(self.distilled, self.task_only))


def run_efficacy(
    cfg: RunConfig,
    teacher_steps: int = 10000,
    student_steps: int = 2000,
    seeds: tuple[int, ...] = (0, 1, 2),
    cache_dir: str | Path | None = None,
) -> EfficacyResult:
    cfg = cfg.resolved()
    schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    teacher = trained_teacher(cfg, teacher_steps, cache_dir)
    teacher.requires_grad_(False)
    d = cfg.data
    dataset = gen_dataset(d.n, d.H, d.W, d.seed)
    heldout = gen_dataset(d.n // 5, d.H, d.W, d.seed + HELDOUT_SEED_OFFSET)
    result = EfficacyResult(heldout_task_loss(teacher, heldout, schedule))
    tr = cfg.train
    plan = plan_feature_match(teacher.config, compress_config(teacher.config, cfg.compression), cfg.recipe, tr.layer_strategy)
    for seed in seeds:
        for distilled in (False, True):
            student = make_student(teacher, cfg.compression, seed, tr.layer_strategy)
            opt = make_optimizer(student, tr.lr, tr.weight_decay)
            train(
                student, dataset, schedule, student_steps, opt,
                teacher=teacher if distilled else None,
                plan=plan if distilled else None,
                weights=cfg.loss_weights if distilled else LossWeights(w_task=1, w_out=0, w_feat=0),
                batch_size=tr.batch_size, cfg_drop_prob=tr.cfg_drop_prob, seed=seed, joint_feat=tr.feat_joint_norm,
            )
            loss = heldout_task_loss(student, heldout, schedule)
            (result.distilled if distilled else result.task_only).append(loss)
            log.info("seed %d %s held-out %.5f", seed, "distilled" if distilled else "task-only", loss)
    return result


@torch.no_grad()
def step0_kd_losses(teacher: Denoiser, cfg: RunConfig, batch_size: int = 4, seed: int = 0) -> tuple[float, float]:
    """(L_out, L_feat) of an identity-compressed student right after weight inheritance."""
    spec = CompressionSpec.identity(teacher.config)
    student = make_student(teacher, spec, seed + 7)
    plan = plan_feature_match(teacher.config, student.config, "all-features")
    schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    images, tokens = stack_batch(gen_dataset(batch_size, cfg.data.H, cfg.data.W, seed))
    gen = torch.Generator().manual_seed(seed)
    t = torch.randint(0, schedule.T, (batch_size,), generator=gen)
    z = q_sample(images, t, torch.randn(images.shape, generator=gen), schedule)
    eps_t, rec_t = teacher.predict(z, t, tokens, plan.teacher_taps())
    eps_s, rec_s = student.predict(z, t, tokens, plan.student_taps())
    l_out = out_kd_loss(eps_t, eps_s)
    l_feat = feat_kd_loss(rec_t, rec_s, plan, LossWeights())
    return float(l_out), float(l_feat)
