import pytest
import torch

from conftest import tiny_config, toy_config
from distillforge.checkpoint import Denoiser
from distillforge.compress import CompressionSpec, MatchPlan, compress_config, inherit_weights, plan_feature_match
from distillforge.data import gen_dataset, stack_batch
from distillforge.diffusion import make_schedule
from distillforge.distill import (
    LossWeights,
    NonFiniteLossError,
    distill_step,
    feat_kd_loss,
    make_optimizer,
    out_kd_loss,
    task_loss,
    train,
    train_teacher,
)
from distillforge.unet import FeatureTapSpec, TapRecord


def _loop_mse(a, b):
    a, b = a.flatten().tolist(), b.flatten().tolist()
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def _rand_pair(gen):
    shape = tuple(torch.randint(1, 5, (3,), generator=gen).tolist())
    a = torch.randn(shape, generator=gen, dtype=torch.float64)
    b = torch.randn(shape, generator=gen, dtype=torch.float64)
    return a, b


def test_task_and_out_losses_match_loop_oracle():
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        a, b = _rand_pair(gen)
        ref = _loop_mse(a, b)
        assert abs(task_loss(a, b).item() - ref) <= 1e-6 * abs(ref)
        assert abs(out_kd_loss(a, b).item() - ref) <= 1e-6 * abs(ref)


def _records(tensors, stage="MID"):
    return [TapRecord(FeatureTapSpec(stage, i + 1, "SA"), t) for i, t in enumerate(tensors)]


def test_feat_loss_matches_loop_oracle():
    gen = torch.Generator().manual_seed(1)
    plan = MatchPlan("p", [(FeatureTapSpec("MID", i, "SA"), FeatureTapSpec("MID", i, "SA")) for i in (1, 2, 3)])
    for _ in range(100):
        pairs = [_rand_pair(gen) for _ in range(3)]
        w = torch.rand(3, generator=gen, dtype=torch.float64).tolist()
        weights = LossWeights(per_pair_overrides={f"MID:SA@{i + 1}": w[i] for i in range(3)})
        got = feat_kd_loss(_records([p[0] for p in pairs]), _records([p[1] for p in pairs]), plan, weights).item()
        ref = sum(w[i] * _loop_mse(pairs[i][1], pairs[i][0]) for i in range(3))
        assert abs(got - ref) <= 1e-6 * abs(ref)


def test_loss_trivia():
    x = torch.randn(2, 3)
    assert task_loss(x, x).item() == 0
    assert task_loss(torch.zeros(4, 5), torch.ones(4, 5)).item() == 1
    assert out_kd_loss(x, x).item() == 0
    plan = MatchPlan("p", [(FeatureTapSpec("MID", 1, "SA"), FeatureTapSpec("MID", 1, "SA"))])
    r = _records([x])
    assert feat_kd_loss(r, r, plan).item() == 0
    shifted = _records([x + 0.5])
    assert feat_kd_loss(r, shifted, plan).item() == pytest.approx(0.25)


def test_feat_loss_joint_norm():
    plan = MatchPlan("p", [(FeatureTapSpec("MID", i, "SA"), FeatureTapSpec("MID", i, "SA")) for i in (1, 2)])
    a = [torch.zeros(2, 3), torch.zeros(4)]
    b = [torch.ones(2, 3), torch.full((4,), 2.0)]
    # pooled: (6 * 1 + 4 * 4) / 10
    assert feat_kd_loss(_records(a), _records(b), plan, joint=True).item() == pytest.approx(2.2)
    assert feat_kd_loss(_records(a), _records(b), plan).item() == pytest.approx(5.0)


def test_feat_loss_missing_pair_named():
    plan = MatchPlan("p", [(FeatureTapSpec("MID", 2, "SA"), FeatureTapSpec("MID", 2, "SA"))])
    with pytest.raises(KeyError, match="MID:SA@2"):
        feat_kd_loss(_records([torch.ones(2)]), _records([torch.ones(2)]), plan)


def test_out_loss_gives_no_teacher_gradient():
    t = torch.randn(3, 4, requires_grad=True)
    s = torch.randn(3, 4, requires_grad=True)
    out_kd_loss(t, s).backward()
    assert t.grad is None or torch.equal(t.grad, torch.zeros_like(t))
    assert s.grad.abs().sum() > 0


def test_loss_weights_non_negative():
    with pytest.raises(Exception):
        LossWeights(w_task=-1)


# -- training step


def _setup(dtype=torch.float32, identity=False):
    t_cfg = toy_config(base_channels=8, tx_depths=(0, 1, 2), mid_tx_depth=2, head_dim=8)
    spec = CompressionSpec.identity(t_cfg) if identity else CompressionSpec(target_tx_depths=(0, 1, 1))
    teacher = Denoiser.build(t_cfg, 0, 100, dtype)
    student = Denoiser.build(compress_config(t_cfg, spec), 1, 100, dtype)
    inherit_weights(teacher.unet, student.unet)
    student.text.load_state_dict(teacher.text.state_dict())
    plan = plan_feature_match(teacher.config, student.config, "koala-default")
    images, tokens = stack_batch(gen_dataset(4, 16, 16, 0))
    return teacher, student, plan, (images.to(dtype), tokens), make_schedule(100, 1e-3, 0.2)


def test_identity_student_has_zero_kd_losses():
    teacher, student, plan, batch, sched = _setup(identity=True)
    m = distill_step(teacher, student, batch, sched, plan, LossWeights(), 0.1, None, torch.Generator().manual_seed(0))
    assert m["l_out"] == 0.0 and m["l_feat"] == 0.0


def test_total_is_weighted_sum_exactly():
    teacher, student, plan, batch, sched = _setup(torch.float64)
    for w in [(1, 0, 0), (0.3, 2.0, 0.7), (0, 1, 1)]:
        weights = LossWeights(w_task=w[0], w_out=w[1], w_feat=w[2])
        m = distill_step(teacher, student, batch, sched, plan, weights, 0.1, None, torch.Generator().manual_seed(2))
        assert m["total"] == w[0] * m["l_task"] + w[1] * m["l_out"] + w[2] * m["l_feat"]
        assert m["l_out"] > 0 and m["l_feat"] > 0


def test_teacher_stays_frozen():
    teacher, student, plan, batch, sched = _setup()
    before = {k: v.clone() for k, v in teacher.named_parameters()}
    opt = make_optimizer(student)
    gen = torch.Generator().manual_seed(0)
    for _ in range(3):
        distill_step(teacher, student, batch, sched, plan, LossWeights(), 0.1, opt, gen)
    assert all(torch.equal(before[k], v) for k, v in teacher.named_parameters())
    assert all(v.grad is None for _, v in teacher.named_parameters())


def test_step_updates_student_and_embedder():
    teacher, student, plan, batch, sched = _setup()
    before = {k: v.clone() for k, v in student.named_parameters()}
    distill_step(teacher, student, batch, sched, plan, LossWeights(), 0.0, make_optimizer(student), torch.Generator())
    changed = [k for k, v in student.named_parameters() if not torch.equal(before[k], v)]
    assert "text.embedding.weight" in changed
    assert len(changed) > 0.9 * len(before)


def test_non_finite_loss_raises():
    teacher, student, plan, batch, sched = _setup()
    images, tokens = batch
    with pytest.raises(NonFiniteLossError, match="l_task"):
        distill_step(None, student, (images * float("nan"), tokens), sched, None, LossWeights(), 0.1, None,
                     torch.Generator())


def test_zero_steps_changes_nothing():
    _, student, _, _, sched = _setup()
    before = {k: v.clone() for k, v in student.named_parameters()}
    train_teacher(student, gen_dataset(4, 16, 16, 0), sched, 0, make_optimizer(student))
    assert all(torch.equal(before[k], v) for k, v in student.named_parameters())


def test_training_is_deterministic(tmp_path):
    runs = []
    for i in range(2):
        _, student, _, _, sched = _setup()
        state = train(student, gen_dataset(8, 16, 16, 0), sched, 5, make_optimizer(student), batch_size=4, seed=3,
                      run_dir=tmp_path / f"r{i}")
        runs.append((state.history, (tmp_path / f"r{i}" / "metrics.csv").read_bytes()))
    assert runs[0] == runs[1]


def test_composite_loss_gradient_check():
    from distillforge.backend import grad_check
    from distillforge.diffusion import q_sample

    t_cfg = tiny_config(tx_depths=(0, 1, 2), mid_tx_depth=2)
    s_cfg = compress_config(t_cfg, CompressionSpec(remove_encoder_last_pair=False, remove_decoder_intermediate_pair=False,
                                                   target_tx_depths=(0, 1, 1)))
    teacher = Denoiser.build(t_cfg, 0, 100, torch.float64)
    student = Denoiser.build(s_cfg, 1, 100, torch.float64)
    inherit_weights(teacher.unet, student.unet)
    plan = MatchPlan("three", [
        (FeatureTapSpec("MID", 1, "SA"), FeatureTapSpec("MID", 1, "SA")),
        (FeatureTapSpec("DW-2", 1, "FFN"), FeatureTapSpec("DW-2", 1, "FFN")),
        (FeatureTapSpec("UP-3", 0, "LF"), FeatureTapSpec("UP-3", 0, "LF")),
    ])
    gen = torch.Generator().manual_seed(0)
    x0 = torch.rand(2, 2, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    t = torch.tensor([3, 70])
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    z = q_sample(x0, t, eps, make_schedule(100, 1e-3, 0.2))
    tokens = torch.tensor([[1, 2, 3, 0], [4, 5, 6, 0]])
    with torch.no_grad():
        eps_t, rec_t = teacher.predict(z, t, tokens, plan.teacher_taps())

    def fn():
        eps_s, rec_s = student.predict(z, t, tokens, plan.student_taps())
        return task_loss(eps_s, eps) + out_kd_loss(eps_t, eps_s) + feat_kd_loss(rec_t, rec_s, plan)

    # every loss term reaches these; checking all ~14k scalars one by one is too slow
    keep = ("mid.tx.0.layers.0.sa.", "dw2.tx.0.layers.0.ffn.proj_out", "up3.res.0.conv2.bias", "conv_out.", "time_embed.2.bias",
            "text.")
    params = {k: v for k, v in student.named_parameters() if k.startswith(keep)}
    assert len(params) >= 8
    report = grad_check(fn, params, eps=1e-5)
    assert report.worst < 1e-4, sorted(report.max_rel_error.items(), key=lambda kv: -kv[1])[:5]
