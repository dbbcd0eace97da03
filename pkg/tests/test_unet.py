import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from conftest import tiny_config, toy_config
from distillforge.unet import (
    STAGES,
    FeatureTapSpec,
    TapError,
    UNetConfig,
    build_unet,
    count_params,
    instantiated_param_count,
)


def _inputs(cfg, b=2, hw=16, dtype=torch.float32, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(b, cfg.in_channels, hw, hw, generator=gen, dtype=dtype)
    t = torch.randint(0, 1000, (b,), generator=gen)
    ctx = torch.randn(b, 4, cfg.context_dim, generator=gen, dtype=dtype)
    return x, t, ctx


# -- hand enumeration of layer shapes, written independently of the model code


def _conv(i, o, k):
    return i * o * k * k + o


def _gn(c):
    return 2 * c


def _lin(i, o):
    return i * o + o


def _res(i, o, temb):
    n = _gn(i) + _conv(i, o, 3) + _lin(temb, o) + _gn(o) + _conv(o, o, 3)
    return n + (_conv(i, o, 1) if i != o else 0)


def test_count_matches_hand_enumeration_without_transformers():
    cfg = UNetConfig(
        in_channels=3, out_channels=3, base_channels=8, channel_mults=(1, 2, 3), tx_depths=(0, 0, 0),
        tx_pairs_encoder=1, tx_pairs_decoder=1, mid_enabled=True, mid_tx_depth=0, head_dim=8,
        context_dim=16, time_embed_dim=32,
    )
    b, temb = 8, 32
    c0, c1, c2 = 8, 16, 24
    expected = (
        _conv(3, b, 3) + _lin(temb // 4, temb) + _lin(temb, temb)
        + _res(b, c0, temb) + _conv(c0, c0, 3)
        + _res(c0, c1, temb) + _conv(c1, c1, 3)
        + _res(c1, c2, temb)
        + 2 * _res(c2, c2, temb)
        # decoder: one pair per stage, each concatenating the last pushed skip
        + _res(c2 + c2, c2, temb) + _conv(c2, c2, 3)
        + _res(c2 + c1, c1, temb) + _conv(c1, c1, 3)
        + _res(c1 + c0, c0, temb)
        + _gn(c0) + _conv(c0, 3, 3)
    )
    budget = count_params(cfg)
    assert budget.total == expected
    assert instantiated_param_count(build_unet(cfg)) == expected
    assert all(v["tx"] == 0 for v in budget.per_stage.values())


@st.composite
def toy_configs(draw):
    head = draw(st.sampled_from([2, 4]))
    base = head * draw(st.integers(1, 3))
    return UNetConfig(
        in_channels=draw(st.integers(1, 4)),
        out_channels=draw(st.integers(1, 4)),
        base_channels=base,
        channel_mults=tuple(draw(st.lists(st.integers(1, 3), min_size=3, max_size=3))),
        tx_depths=tuple(draw(st.lists(st.integers(0, 2), min_size=3, max_size=3))),
        tx_pairs_encoder=draw(st.integers(1, 3)),
        tx_pairs_decoder=draw(st.integers(1, 4)),
        mid_enabled=draw(st.booleans()),
        mid_tx_depth=draw(st.integers(0, 2)),
        head_dim=head,
        context_dim=draw(st.integers(1, 8)),
        time_embed_dim=4 * draw(st.integers(2, 6)),
    )


@settings(max_examples=20, deadline=None)
@given(toy_configs())
def test_count_params_equals_instantiated(cfg):
    budget = count_params(cfg)
    assert budget.total == instantiated_param_count(build_unet(cfg))
    assert sum(sum(v.values()) for v in budget.per_stage.values()) == budget.total


@settings(max_examples=8, deadline=None)
@given(toy_configs())
def test_forward_shape_invariance(cfg):
    model = build_unet(cfg)
    x, t, ctx = _inputs(cfg, b=1, hw=8)
    out, records = model(x, t, ctx)
    assert out.shape == x.shape[:1] + (cfg.out_channels,) + x.shape[2:]
    assert records == []


def test_forward_reference_toy_shape():
    cfg = UNetConfig(base_channels=32, channel_mults=(1, 2, 4), tx_depths=(0, 2, 4))
    model = build_unet(cfg)
    x, t, ctx = _inputs(cfg, b=1, hw=32)
    out, _ = model(x, t, ctx)
    assert out.shape == (1, 3, 32, 32)


def test_build_deterministic(toy):
    a = build_unet(toy, seed=3).state_dict()
    b = build_unet(toy, seed=3).state_dict()
    c = build_unet(toy, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_lf_taps_follow_u_shape(toy):
    model = build_unet(toy)
    taps = [FeatureTapSpec(s, 0, "LF") for s in STAGES]
    x, t, ctx = _inputs(toy, hw=16)
    _, records = model(x, t, ctx, taps)
    assert [r.spec for r in records] == taps
    sizes = [r.tensor.shape[-1] for r in records]
    assert sizes == [16, 8, 4, 4, 4, 8, 16]
    low = sizes.index(min(sizes))
    assert all(a > b for a, b in zip(sizes[:low], sizes[1 : low + 1]))
    assert all(a < b for a, b in zip(sizes[-low - 1 : -1], sizes[-low:]))


def test_mid_sa_token_count(toy):
    model = build_unet(toy)
    x, t, ctx = _inputs(toy, hw=16)
    _, (rec,) = model(x, t, ctx, [FeatureTapSpec("MID", 1, "SA")])
    assert rec.tensor.shape == (2, (16 // 4) * (16 // 4), toy.level_channels(2))


def test_records_in_tap_order(toy):
    model = build_unet(toy)
    taps = [FeatureTapSpec("UP-3", 0, "LF"), FeatureTapSpec("DW-2", 3, "CA"), FeatureTapSpec("MID", 2, "Res"),
            FeatureTapSpec("UP-1", 12, "FFN")]
    x, t, ctx = _inputs(toy)
    _, records = model(x, t, ctx, taps)
    assert [r.spec for r in records] == taps


def test_taps_do_not_interfere(toy):
    model = build_unet(toy)
    x, t, ctx = _inputs(toy)
    plain, _ = model(x, t, ctx)
    tapped, records = model(x, t, ctx, model.available_taps(), capture_attn=True)
    assert torch.equal(plain, tapped)
    assert len(records) == len(model.available_taps())


def test_attention_rows_sum_to_one(toy):
    model = build_unet(toy)
    x, t, ctx = _inputs(toy)
    taps = [s for s in model.available_taps() if s.kind == "SA"]
    _, records = model(x, t, ctx, taps, capture_attn=True)
    for r in records:
        assert r.attn_probs is not None
        assert torch.allclose(r.attn_probs.sum(-1), torch.ones(()), atol=1e-5)


def test_sa_tap_is_pre_residual(toy):
    model = build_unet(toy)
    x, t, ctx = _inputs(toy)
    taps = [FeatureTapSpec("MID", 1, "SA"), FeatureTapSpec("MID", 1, "CA"), FeatureTapSpec("MID", 1, "FFN"),
            FeatureTapSpec("MID", 1, "TX"), FeatureTapSpec("MID", 2, "TX")]
    _, (sa, ca, ffn, tx1, tx2) = model(x, t, ctx, taps)
    layer2 = model.mid.tx[0].layers[1]
    # the layer-1 output is the residual sum of its own input and its three sub-layer outputs
    assert tx1.tensor.shape == sa.tensor.shape == ca.tensor.shape == ffn.tensor.shape
    with torch.no_grad():
        sa2, _ = layer2.sa(layer2.norm1(tx1.tensor))
        h = tx1.tensor + sa2
        h = h + layer2.ca(layer2.norm2(h), ctx)[0]
        h = h + layer2.ffn(layer2.norm3(h))
    assert torch.allclose(h, tx2.tensor, atol=1e-5)


def test_invalid_tap_named(toy):
    model = build_unet(toy)
    x, t, ctx = _inputs(toy)
    bad = FeatureTapSpec("DW-1", 1, "SA")
    with pytest.raises(TapError, match="DW-1:SA@1"):
        model(x, t, ctx, [bad])
    with pytest.raises(TapError):
        model(x, t, ctx, [FeatureTapSpec("MID", 5, "SA")])
    with pytest.raises(TapError):
        model(x, t, ctx, [FeatureTapSpec("MID", 1, "XX")])


def test_timestep_out_of_range(toy):
    model = build_unet(toy, num_timesteps=100)
    x, _, ctx = _inputs(toy)
    with pytest.raises(ValueError):
        model(x, torch.tensor([0, 100]), ctx)
    with pytest.raises(ValueError):
        model(x, torch.tensor([-1, 0]), ctx)


def test_config_errors_name_stage():
    with pytest.raises(ValidationError, match="DW-2"):
        toy_config(head_dim=3)
    with pytest.raises(ValidationError):
        toy_config(tx_pairs_encoder=0)


def test_config_json_round_trip(toy, tmp_path):
    path = tmp_path / "c.json"
    toy.to_json(path)
    assert UNetConfig.from_json(path) == toy
    assert set(toy.model_dump()) == {
        "in_channels", "out_channels", "base_channels", "channel_mults", "tx_depths", "tx_pairs_encoder",
        "tx_pairs_decoder", "mid_enabled", "mid_tx_depth", "head_dim", "context_dim", "time_embed_dim",
    }
    with pytest.raises(ValidationError):
        UNetConfig.model_validate({**toy.model_dump(), "bogus": 1})


def test_gradient_reaches_every_parameter():
    cfg = tiny_config()
    model = build_unet(cfg, dtype=torch.float64)
    x, t, ctx = _inputs(cfg, hw=8, dtype=torch.float64)
    out, _ = model(x, t, ctx)
    ((out - x) ** 2).mean().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().max() > 0, name


@pytest.mark.parametrize("make", [tiny_config, toy_config])
def test_output_depends_on_timestep(make):
    # guards against norm groups of one channel, which cancel the timestep shift
    cfg = make()
    model = build_unet(cfg, dtype=torch.float64)
    x, _, ctx = _inputs(cfg, b=1, hw=8, dtype=torch.float64)
    a, _ = model(x, torch.tensor([10]), ctx)
    b, _ = model(x, torch.tensor([600]), ctx)
    assert (a - b).abs().max() > 1e-6
    out, _ = model(x, torch.tensor([10]), ctx)
    out.square().mean().backward()
    assert model.time_embed[2].bias.grad.abs().max() > 1e-8


def test_parameter_names_encode_location(toy):
    names = [n for n, _ in build_unet(toy).named_parameters()]
    assert len(names) == len(set(names))
    assert "up1.tx.0.layers.0.sa.out_proj.weight" in names
    assert "mid.tx.0.layers.3.ffn.proj_out.bias" in names


def test_fractions_sum_to_one(toy):
    budget = count_params(toy)
    assert abs(sum(sum(v.values()) for v in budget.fractions.values()) - 1) < 1e-9
