from pathlib import Path

import numpy as np
import pytest
import torch

from veggie.conditioner import ConditionerConfig
from veggie.diffusion import UNetConfig

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cond():
    return ConditionerConfig(d_model=32, d_cond=16, layers=1, heads=2, m=4, patch=4, max_text=24)


@pytest.fixture
def tiny_unet():
    return UNetConfig(base_width=16, channel_multipliers=(1, 2), attn_resolutions=(1, 2), d_cond=16, heads=2, groups=4)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def tiny_model(tiny_cond, tiny_unet):
    from veggie.model import VeggieModel

    return VeggieModel.create(tiny_cond, tiny_unet, seed=0)


@pytest.fixture
def tiny_samples():
    """Eight 2-frame 8x8 moving-shapes samples (grounding and recolour)."""
    from veggie.toydata import SceneConfig, generate_bank

    cfg = SceneConfig(H=8, W=8, n=2, size_range=(3, 4), max_speed=1, max_shapes=2, visual_mode="recolor")
    return [g.sample for g in generate_bank(8, ["grounding", "visual_feature"], seed=5, scene_config=cfg, balanced=True)]


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion, ok: bool, detail: str) -> None:
    ACCEPTANCE[str(criterion)] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abc")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
