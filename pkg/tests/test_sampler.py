import numpy as np
import pytest
import torch

from veggie.errors import NotInitialized
from veggie.media import Skill, VideoClip
from veggie.sampler import (
    SKILL_GUIDANCE,
    Editor,
    GuidanceConfig,
    combine_guidance,
    guided_noise,
    noise_stream,
    sample,
    scales_for,
    timesteps,
)
from veggie.schedule import NoiseSchedule


class Branchy(torch.nn.Module):
    """Stub whose output identifies the condition variant: a (uncond), b (video only), c (full)."""

    def __init__(self, a=0.0, b=1.0, c=2.0):
        super().__init__()
        self.vals = (a, b, c)

    def forward(self, z, t, source, cond):
        a, b, c = self.vals
        has_video = source.flatten(1).abs().sum(1) > 0
        has_task = cond.flatten(1)[:, 0] > 0
        out = torch.where(has_task, torch.tensor(c), torch.where(has_video, torch.tensor(b), torch.tensor(a)))
        return out.view(-1, 1, 1, 1, 1).expand_as(z).to(z.dtype)


def _conds(shape=(1, 2, 3, 4, 4)):
    z = torch.randn(shape)
    src = torch.rand(shape) + 0.1
    task = torch.ones(shape[0], shape[1], 4, 8)
    null = -torch.ones(shape[0], shape[1], 4, 8)
    return z, src, task, null


def test_guidance_substitution():
    z, src, task, null = _conds()
    out = guided_noise(Branchy(), z, 10, src, task, null, 10.5, 2.0)
    assert torch.allclose(out, torch.full_like(z, 12.5))


def test_guidance_identities_random_stubs():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        e = [torch.randn(2, 3, 4, generator=g) for _ in range(3)]
        assert torch.equal(combine_guidance(*e, 1.0, 1.0), e[0])
        assert torch.equal(combine_guidance(*e, 0.0, 0.0), e[2])
        gt, gv = torch.rand(2, generator=g).tolist()
        expected = e[2] + gt * (e[0] - e[1]) + gv * (e[1] - e[2])
        torch.testing.assert_close(combine_guidance(*e, gt * 20, gv * 5),
                                   e[2] + gt * 20 * (e[0] - e[1]) + gv * 5 * (e[1] - e[2]))
        torch.testing.assert_close(combine_guidance(*e, gt, gv), expected)


def test_guided_noise_batches_three_branches(tiny_model):
    model = tiny_model.denoiser.eval()
    model.conv_out.weight.data.normal_(0, 0.1)
    z = torch.randn(1, 2, 3, 8, 8)
    src = torch.randn(1, 2, 3, 8, 8)
    task = torch.randn(1, 2, 4, 16)
    null = tiny_model.conditioner.null_condition(2, 1)
    t = torch.tensor([50])
    with torch.no_grad():
        full = model(z, t, src, task)
        vid = model(z, t, src, null)
        unc = model(z, t, torch.zeros_like(src), null)
        out = guided_noise(model, z, t, src, task, null, 14.5, 1.5)
    torch.testing.assert_close(out, unc + 14.5 * (full - vid) + 1.5 * (vid - unc), atol=1e-4, rtol=1e-4)


def test_skill_table():
    assert set(SKILL_GUIDANCE) == set(Skill)
    assert scales_for("grounding") == (14.5, 1.5)
    assert scales_for(Skill.REASONING) == (14.5, 1.5)
    assert scales_for("removal") == (10.5, 2.0)
    assert scales_for(None) == (10.5, 2.0)


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(g_T=float("inf"))
    with pytest.raises(ValueError):
        GuidanceConfig(steps=0)
    with pytest.raises(ValueError):
        GuidanceConfig(eta=1.5)


def test_oracle_reconstruction_one_step_schedule():
    sched = NoiseSchedule.from_betas([0.3])
    z0 = torch.rand(1, 2, 3, 4, 4, dtype=torch.float64) * 2 - 1
    a = sched.abar(1)

    def oracle(z, t):
        return (z - np.sqrt(a) * z0) / np.sqrt(1 - a)

    out = sample(oracle, z0.shape, sched, GuidanceConfig(steps=1, sampler="ddpm"), dtype=torch.float64)
    torch.testing.assert_close(out, z0, atol=1e-12, rtol=0)


@pytest.mark.parametrize("sampler", ["ddim", "ddpm"])
def test_oracle_reconstruction_full_schedule(sampler):
    sched = NoiseSchedule.linear()
    z0 = torch.rand(1, 1, 3, 4, 4, dtype=torch.float64) * 1.6 - 0.8

    def oracle(z, t):
        a = sched.abar(t)
        return (z - np.sqrt(a) * z0) / np.sqrt(1 - a)

    out = sample(oracle, z0.shape, sched, GuidanceConfig(steps=25, sampler=sampler, seed=3), dtype=torch.float64)
    torch.testing.assert_close(out, z0, atol=1e-9, rtol=0)


def test_timesteps_and_noise_stream():
    ts = timesteps(NoiseSchedule.linear(), 50)
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 50
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert torch.equal(noise_stream(7, 0, (2, 3)), noise_stream(7, 0, (2, 3)))
    assert not torch.equal(noise_stream(7, 0, (2, 3)), noise_stream(7, 1, (2, 3)))
    assert not torch.equal(noise_stream(7, 0, (2, 3)), noise_stream(8, 0, (2, 3)))


def test_editor_requires_model(rng):
    with pytest.raises(NotInitialized):
        Editor().edit(VideoClip(rng.random((2, 8, 8, 3))), "remove the red square")


def test_editor_determinism_and_log(tiny_model, rng):
    ed = Editor(tiny_model)
    clip = VideoClip(rng.random((2, 8, 8, 3)))
    a, log = ed.edit(clip, "fill the red square with green", skill_hint="grounding",
                     cfg=None)
    assert (log["guidance"]["g_T"], log["guidance"]["g_V"]) == (14.5, 1.5)
    assert log["guidance"]["steps"] == 50 and log["guidance"]["sampler"] == "ddim"
    fast = GuidanceConfig(steps=5, seed=9)
    b, _ = ed.edit(clip, "make it sepia", cfg=fast)
    c, _ = ed.edit(clip, "make it sepia", cfg=fast)
    assert b.frames.tobytes() == c.frames.tobytes()
    assert a.shape == clip.shape and a.frames.min() >= 0 and a.frames.max() <= 1
