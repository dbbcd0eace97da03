"""Command-line entry point: ``distillforge <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from . import analysis
from .checkpoint import Denoiser, load_checkpoint, save_checkpoint
from .compress import STRATEGIES, CompressionError, CompressionSpec, compress_config, inherit_weights, plan_feature_match
from .config import RunConfig, load_compression_spec, load_unet_config
from .data import VOCAB, gen_dataset, stack_batch
from .diffusion import SamplerConfig, euler_sample, make_schedule, q_sample
from .distill import make_optimizer, train
from .storage import write_tensors
from .unet import FeatureTapSpec, TapError, count_params

log = logging.getLogger("distillforge")

BYTES_PER_PARAM = 4


class UsageError(Exception):
    pass


VALIDATION_ERRORS = (
    UsageError,
    ValidationError,
    CompressionError,
    TapError,
    FileNotFoundError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)


def _echo(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _run_dir(out: str | Path, command: str) -> Path:
    """Fresh directory ``<out>/<command>-<timestamp>[-n]``; never reuses an existing one."""
    base = Path(out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for n in itertools.count():
        path = base / (f"{command}-{stamp}" if n == 0 else f"{command}-{stamp}-{n}")
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            continue


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train_update = {}
    if getattr(args, "seed", None) is not None:
        train_update["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        train_update["steps"] = args.steps
    if train_update:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update=train_update)})
    return cfg.resolved()


def _schedule(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


# ---------------------------------------------------------------------------
# commands


def cmd_budget(args) -> int:
    configs = [(ref, load_unet_config(ref)) for ref in args.configs]
    _echo({"configs": {ref: c.model_dump(mode="json") for ref, c in configs}})
    budgets = [(Path(ref).stem if ref.endswith(".json") else ref, count_params(c)) for ref, c in configs]
    rows = []
    print(f"\n{'config':<16}{'total':>16}{'params (M)':>12}{'ckpt (GB)':>11}{'low-tx share':>14}")
    for label, b in budgets:
        share = analysis.lowest_level_tx_share(b)
        print(f"{label:<16}{b.total:>16,}{b.total / 1e6:>12.1f}{b.total * BYTES_PER_PARAM / 1e9:>11.2f}{share:>14.1%}")
    print("\nper-stage breakdown (M params: res / tx / other)")
    for label, b in budgets:
        parts = "  ".join(f"{s} {v['res'] / 1e6:.1f}/{v['tx'] / 1e6:.1f}/{v['other'] / 1e6:.1f}" for s, v in b.per_stage.items())
        print(f"  {label}: {parts}")
    ref_label, ref = budgets[0]
    if len(budgets) > 1:
        print(f"\nsize reduction relative to {ref_label}")
    for label, b in budgets[1:]:
        red = 1 - b.total / ref.total
        print(f"  {label}: {red:.1%}")
        rows.append((label, ref_label, red))
    if args.csv or args.out:
        path = Path(args.csv) if args.csv else Path(args.out) / "budget.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config", "stage", "res", "tx", "other", "total", "ckpt_bytes"])
            for label, b in budgets:
                for s, v in b.per_stage.items():
                    w.writerow([label, s, v["res"], v["tx"], v["other"], sum(v.values()), ""])
                w.writerow([label, "TOTAL", "", "", "", b.total, b.total * BYTES_PER_PARAM])
            w.writerow([])
            w.writerow(["config", "reference", "reduction"])
            for la, lb, red in rows:
                w.writerow([la, lb, repr(red)])
        print(f"\nwrote {path}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    d = cfg.data
    if args.seed is not None:
        d = d.model_copy(update={"seed": args.seed})
    _echo({"data": d.model_dump()})
    samples = gen_dataset(d.n, d.H, d.W, d.seed)
    images, tokens = stack_batch(samples)
    out = Path(args.out)
    header = {"captions": [s.caption for s in samples], "data": d.model_dump()}
    write_tensors(out, [({"name": "images"}, images), ({"name": "tokens"}, tokens)], header)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_run_config(args)
    _echo(cfg.model_dump(mode="json"))
    run_dir = _run_dir(args.out, "train-teacher")
    (run_dir / "config.json").write_text(cfg.to_json() + "\n")
    schedule = _schedule(cfg)
    tr = cfg.train
    model = Denoiser.build(cfg.resolved_unet(), tr.seed, schedule.T)
    dataset = gen_dataset(cfg.data.n, cfg.data.H, cfg.data.W, cfg.data.seed)
    opt = make_optimizer(model, tr.lr, tr.weight_decay)
    state = train(
        model, dataset, schedule, tr.steps, opt,
        batch_size=tr.batch_size, cfg_drop_prob=tr.cfg_drop_prob, seed=tr.seed,
        run_dir=run_dir, checkpoint_every=tr.checkpoint_every, run_config=_ckpt_echo(cfg),
    )
    print(f"run directory: {run_dir}")
    print(f"final step {state.step}; running task loss {state.running['l_task']:.5f}")
    return 0


def _ckpt_echo(cfg: RunConfig) -> dict:
    return {"schedule": cfg.schedule.model_dump(), "run": cfg.model_dump(mode="json")}


def cmd_distill(args) -> int:
    cfg = _load_run_config(args)
    teacher, manifest = load_checkpoint(args.teacher)
    t_cfg = teacher.config
    spec = cfg.compression or CompressionSpec.identity(t_cfg)
    s_cfg = compress_config(t_cfg, spec)
    tr = cfg.train
    task_only = cfg.recipe in ("none", "task-only")
    plan = None if task_only else plan_feature_match(t_cfg, s_cfg, cfg.recipe, tr.layer_strategy)
    cfg = cfg.model_copy(update={"unet": t_cfg, "compression": spec})
    _echo({**cfg.model_dump(mode="json"), "student_unet": s_cfg.model_dump(mode="json"), "teacher_checkpoint": str(args.teacher)})

    run_dir = _run_dir(args.out, "distill")
    (run_dir / "config.json").write_text(cfg.to_json() + "\n")
    if plan is not None:
        (run_dir / "plan.json").write_text(plan.to_json() + "\n")
    schedule = _schedule(cfg)
    if teacher.unet.num_timesteps != schedule.T:
        raise UsageError(f"teacher was trained with T={teacher.unet.num_timesteps}, run config has T={schedule.T}")

    student = Denoiser.build(s_cfg, tr.seed, schedule.T)
    wmap = inherit_weights(teacher.unet, student.unet, tr.layer_strategy)
    student.text.load_state_dict(teacher.text.state_dict())
    (run_dir / "weight_map.json").write_text(
        json.dumps({"entries": wmap.entries, "unmatched_student": wmap.unmatched_student}, indent=2) + "\n"
    )
    dataset = gen_dataset(cfg.data.n, cfg.data.H, cfg.data.W, cfg.data.seed)
    opt = make_optimizer(student, tr.lr, tr.weight_decay)
    state = train(
        student, dataset, schedule, tr.steps, opt,
        teacher=None if task_only else teacher, plan=plan, weights=cfg.loss_weights,
        batch_size=tr.batch_size, cfg_drop_prob=tr.cfg_drop_prob, seed=tr.seed,
        joint_feat=tr.feat_joint_norm, run_dir=run_dir, checkpoint_every=tr.checkpoint_every,
        run_config=_ckpt_echo(cfg),
    )
    print(f"run directory: {run_dir}")
    print(f"final step {state.step}; running total {state.running['total']:.5f}")
    return 0


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """Map [-1, 1] images ``[B, 3, H, W]`` to ``[B, H, W, 3]`` uint8."""
    arr = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).cpu().numpy()


def cmd_sample(args) -> int:
    from PIL import Image

    model, manifest = load_checkpoint(args.checkpoint)
    echo = manifest["config"]
    run = echo.get("run", {})
    sampler = dict(run.get("sampler", {}))
    for key, val in (("steps", args.steps), ("cfg_scale", args.cfg_scale), ("seed", args.seed)):
        if val is not None:
            sampler[key] = val
    scfg = SamplerConfig(**{k: sampler[k] for k in ("steps", "cfg_scale", "seed") if k in sampler})
    sched_cfg = echo.get("schedule", {"T": model.unet.num_timesteps})
    schedule = make_schedule(**sched_cfg) if "beta_start" in sched_cfg else make_schedule(sched_cfg["T"])
    data = run.get("data", {"H": 32, "W": 32})
    tokens = torch.tensor([VOCAB.encode(args.caption)] * args.n)
    _echo({"checkpoint": str(args.checkpoint), "caption": args.caption, "sampler": scfg.__dict__,
           "schedule": sched_cfg, "n": args.n})

    dtype = next(iter(model.parameters())).dtype
    shape = (args.n, model.config.in_channels, data["H"], data["W"])
    null = torch.full_like(tokens, VOCAB.null_id)
    images = euler_sample(model.eps_fn(), schedule, scfg, tokens, null, shape, dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, arr in enumerate(to_uint8(images)):
        path = out / f"sample-{i}.png"
        Image.fromarray(arr).save(path)
        print(f"wrote {path}")
    return 0


def cmd_plan(args) -> int:
    teacher = load_unet_config(args.teacher)
    spec = load_compression_spec(args.spec)
    student = compress_config(teacher, spec)
    _echo({"teacher": teacher.model_dump(mode="json"), "spec": spec.model_dump(mode="json"),
           "student": student.model_dump(mode="json"), "recipe": args.recipe, "strategy": args.strategy})
    plan = plan_feature_match(teacher, student, args.recipe, args.strategy)
    text = plan.to_json()
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def _analysis_records(args, kind: str):
    """Records from a dump, or by running a checkpoint on one generated batch."""
    if args.dump:
        return analysis.load_tap_dump(args.dump), None
    if not args.checkpoint:
        raise UsageError("analyze cosine/pca needs --dump or --checkpoint")
    model, manifest = load_checkpoint(args.checkpoint)
    run = manifest["config"].get("run", {})
    data = run.get("data", {"H": 32, "W": 32})
    seed = args.seed if args.seed is not None else 0
    samples = gen_dataset(args.n, data["H"], data["W"], seed)
    images, tokens = stack_batch(samples)
    images = images.to(next(iter(model.parameters())).dtype)
    sched_cfg = manifest["config"].get("schedule", {"T": model.unet.num_timesteps})
    schedule = make_schedule(**sched_cfg) if "beta_start" in sched_cfg else make_schedule(sched_cfg["T"])
    t_index = args.t if args.t is not None else schedule.T // 2
    t = torch.full((images.shape[0],), t_index, dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    z = q_sample(images, t, torch.randn(images.shape, generator=gen, dtype=images.dtype), schedule)
    taps = analysis.analysis_taps(model.config, kind)
    if not taps:
        raise UsageError("model has no transformer layers to analyze")
    out = Path(args.out)
    path = analysis.export_tap_dump(model, (z, t, tokens), taps, out / "dump", capture_attn=(kind == "SA"))
    print(f"wrote feature dump {path}")
    return analysis.load_tap_dump(path), model.config


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "params":
        if not args.config:
            raise UsageError("analyze params needs --config")
        cfg = load_unet_config(args.config)
        _echo({"config": cfg.model_dump(mode="json")})
        budget = analysis.param_distribution(cfg)
        for stage, parts in budget.per_stage.items():
            frac = sum(parts.values()) / budget.total
            print(f"{stage:<5} res {parts['res']:>14,} tx {parts['tx']:>14,} other {parts['other']:>12,}  {frac:6.1%}")
        share = analysis.lowest_level_tx_share(budget)
        print(f"total {budget.total:,}")
        print(f"lowest-resolution transformer share (DW-3 + MID + UP-1): {share:.1%}")
        analysis.write_budget_csv(budget, out / "params.csv", Path(args.config).stem)
        print(f"wrote {out / 'params.csv'}")
        return 0

    _echo({k: v for k, v in vars(args).items() if k != "func"})
    if args.what == "cosine":
        records, cfg = _analysis_records(args, "TX")
        groups = analysis.stage_layer_outputs(records)
        curves = []
        for stage, outs in groups.items():
            depth = args.stack_depth or (cfg.stage_depth(stage) if cfg is not None else len(outs))
            for k, stack in enumerate(analysis.split_stacks(outs, depth)):
                label = stage if len(outs) == depth else f"{stage}/{k + 1}"
                if len(stack) >= 2:
                    curves.append(analysis.cross_layer_cosine(stack, True, label))
        if not curves:
            raise UsageError("dump holds no stage with two or more transformer layer outputs (kind TX)")
        analysis.write_curves_csv(curves, out / "cosine.csv")
        for c in curves:
            print(f"{c.stage}: " + " ".join(f"{v:.3f}" for v in c.values))
        if args.png:
            analysis.plot_curves(curves, out / "cosine.png")
        print(f"wrote {out / 'cosine.csv'}")
        return 0

    records, cfg = _analysis_records(args, "SA")
    with_attn = [r for r in records if r.attn_probs is not None]
    if args.stage:
        with_attn = [r for r in with_attn if r.spec.stage == args.stage]
    if args.layer:
        with_attn = [r for r in with_attn if r.spec.block_index == args.layer]
    if not with_attn:
        raise UsageError("no self-attention maps in the selected records")
    rec = with_attn[0]
    rows = analysis.attention_rows(rec.attn_probs)
    result = analysis.attention_pca(rows, min(args.k, *rows.shape))
    analysis.write_pca_csv(result, out / "pca.csv")
    print(f"PCA of {rec.spec}: explained variance " + " ".join(f"{v:.4g}" for v in result.explained_variance))
    if args.png:
        n_tok = rec.attn_probs.shape[-1]
        side = int(round(n_tok**0.5))
        analysis.plot_pca_rgb(result, (side, n_tok // side), out / "pca.png")
    print(f"wrote {out / 'pca.csv'}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="distillforge", description="U-Net compression and self-attention distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("budget", help="parameter budget of U-Net configs")
    b.add_argument("configs", nargs="+", help="config paths or shipped names (sdxl-unet, koala-1b, koala-700m)")
    b.add_argument("--csv")
    b.add_argument("--out")
    b.set_defaults(func=cmd_budget)

    def run_flags(sp):
        sp.add_argument("--config", help="run config JSON (path or shipped name)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--out", default="runs")

    g = sub.add_parser("gen-data", help="render the captioned-shapes dataset to a cache directory")
    run_flags(g)
    g.set_defaults(func=cmd_gen_data, out="data-cache")

    t = sub.add_parser("train-teacher", help="train a toy teacher with the denoising loss")
    run_flags(t)
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="compress a teacher and distill it into the student")
    run_flags(d)
    d.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    d.set_defaults(func=cmd_distill)

    s = sub.add_parser("sample", help="Euler sampling with classifier-free guidance to PNG")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--caption", default="")
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--out", default="samples")
    s.set_defaults(func=cmd_sample)

    pl = sub.add_parser("plan", help="emit the teacher/student feature match plan as JSON")
    pl.add_argument("--teacher", "--config", dest="teacher", required=True)
    pl.add_argument("--spec", required=True, help="compression spec JSON (path or shipped name)")
    pl.add_argument("--recipe", default="koala-default")
    pl.add_argument("--strategy", default="SA-bottom", choices=STRATEGIES)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plan)

    a = sub.add_parser("analyze", help="parameter dissection, cross-layer cosine, attention PCA")
    a.add_argument("what", choices=("cosine", "pca", "params"))
    a.add_argument("--config", help="U-Net config for 'params'")
    a.add_argument("--dump")
    a.add_argument("--checkpoint")
    a.add_argument("--stage")
    a.add_argument("--layer", type=int)
    a.add_argument("--stack-depth", type=int, help="cosine: layers per transformer stack (one curve per stack)")
    a.add_argument("--k", type=int, default=3)
    a.add_argument("--n", type=int, default=4, help="batch size when running a checkpoint")
    a.add_argument("--t", type=int, help="timestep index when running a checkpoint")
    a.add_argument("--seed", type=int)
    a.add_argument("--png", action="store_true")
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DISTILLFORGE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
