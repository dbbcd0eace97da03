import pytest
import torch

from distillforge.unet import UNetConfig

torch.set_num_threads(1)


def tiny_config(**overrides) -> UNetConfig:
    """Smallest config with every stage kind; used by the gradient checks."""
    base = dict(
        in_channels=2,
        out_channels=2,
        base_channels=4,
        channel_mults=(1, 1, 2),
        tx_depths=(0, 1, 1),
        tx_pairs_encoder=1,
        tx_pairs_decoder=1,
        mid_enabled=True,
        mid_tx_depth=1,
        head_dim=4,
        context_dim=4,
        time_embed_dim=8,
    )
    base.update(overrides)
    return UNetConfig(**base)


def toy_config(**overrides) -> UNetConfig:
    """Reference topology (2 encoder / 3 decoder pairs) at toy width."""
    base = dict(
        in_channels=3,
        out_channels=3,
        base_channels=8,
        channel_mults=(1, 2, 4),
        tx_depths=(0, 2, 4),
        tx_pairs_encoder=2,
        tx_pairs_decoder=3,
        mid_enabled=True,
        mid_tx_depth=4,
        head_dim=8,
        context_dim=16,
        time_embed_dim=32,
    )
    base.update(overrides)
    return UNetConfig(**base)


@pytest.fixture
def toy():
    return toy_config()


@pytest.fixture
def tiny():
    return tiny_config()


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[str, list[tuple[str, bool, str, float]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[crit]
        ok = all(p[1] for p in parts)
        secs = sum(p[3] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if passed else 'FAIL'} ({info})" for name, passed, info, _ in parts)
        terminalreporter.write_line(f"{crit} {'PASS' if ok else 'FAIL'} [{secs:.1f}s] {detail}")
