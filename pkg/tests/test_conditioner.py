import numpy as np
import pytest
import torch

from veggie.conditioner import Conditioner, ConditionerConfig, LoraConfig, export_query_projection, pca
from veggie.errors import AlreadyAdapted, EmptyCondition, InsufficientData, ShapeError
from veggie.media import InstructionSample, Skill, VideoClip


@pytest.fixture
def clip(rng):
    return VideoClip(rng.random((3, 8, 8, 3)))


def test_default_shape_contract(rng):
    cond = Conditioner(ConditionerConfig(layers=1)).eval()
    clip = VideoClip(rng.random((8, 32, 32, 3)))
    assert cond.encode(clip, "fill the red square with green").shape == (8, 32, 128)


def test_encode_deterministic_in_eval(tiny_cond, clip):
    cond = Conditioner(tiny_cond).eval()
    a = cond.encode(clip, "remove the blue circle")
    b = cond.encode(clip, "remove the blue circle")
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()


def test_one_word_changes_tokens(tiny_cond, clip):
    cond = Conditioner(tiny_cond).eval()
    a = cond.encode(clip, "remove the blue circle")
    b = cond.encode(clip, "remove the red circle")
    assert torch.linalg.norm(a - b) > 0


def test_encode_errors(tiny_cond, clip, rng):
    cond = Conditioner(tiny_cond).eval()
    with pytest.raises(EmptyCondition):
        cond.encode(clip, "   ")
    # a reference image alone is a valid condition
    assert cond.encode(clip, "", [rng.random((8, 8, 3))]).shape == (3, 4, 16)
    with pytest.raises(ShapeError):
        cond.encode(VideoClip(rng.random((2, 6, 6, 3))), "x")


def test_batched_forward_matches_single(tiny_cond, rng):
    cond = Conditioner(tiny_cond).eval()
    frames = torch.from_numpy(rng.random((2, 2, 3, 8, 8))).float()
    texts = ["make it sepia", "add a small yellow triangle on the left"]
    both = cond(frames, texts)
    for i in range(2):
        single = cond(frames[i:i + 1], texts[i:i + 1])[0]
        torch.testing.assert_close(both[i], single, atol=1e-5, rtol=1e-5)


def test_null_condition_broadcast(tiny_cond):
    cond = Conditioner(tiny_cond)
    one, eight = cond.null_condition(1), cond.null_condition(8)
    assert eight.shape == (8, 4, 16)
    assert torch.equal(one[0], eight[0]) and torch.equal(eight[0], eight[7])
    assert torch.isfinite(eight).all()
    assert cond.null_condition(3, batch=2).shape == (2, 3, 4, 16)


def test_lora_scale_and_zero_residual(tiny_cond, clip):
    assert LoraConfig(rank=64, alpha=16).scale == 0.25
    cond = Conditioner(tiny_cond).eval()
    before = cond.encode(clip, "turn the background blue")
    cond.apply_lora(LoraConfig(rank=8, alpha=2))
    after = cond.encode(clip, "turn the background blue")
    assert torch.equal(before, after)
    with pytest.raises(AlreadyAdapted):
        cond.apply_lora()


def test_lora_trainable_audit(tiny_cond):
    cond = Conditioner(tiny_cond)
    cond.apply_lora(LoraConfig(rank=4))
    trainable = {n for n, p in cond.named_parameters() if p.requires_grad}
    expected = {"queries", "alignment.proj.weight", "alignment.proj.bias", "alignment.null_tokens"}
    lora = {n for n in trainable if n.endswith("lora_A.weight") or n.endswith("lora_B.weight")}
    # q, k, v, o per layer, A and B each
    assert len(lora) == 8 * tiny_cond.layers
    assert trainable == expected | lora


def test_lora_config_validation():
    with pytest.raises(ValueError):
        LoraConfig(rank=0)
    with pytest.raises(ValueError):
        LoraConfig(dropout=1.0)


def test_alignment_net_is_affine(tiny_cond):
    net = Conditioner(tiny_cond).alignment
    g = torch.Generator().manual_seed(3)
    s1, s2 = torch.randn(5, 32, generator=g), torch.randn(5, 32, generator=g)
    a, b = 0.3, -1.7
    lhs = net(a * s1 + b * s2)
    bias = net(torch.zeros(1, 32))
    rhs = a * net(s1) + b * net(s2) + (1 - a - b) * bias
    torch.testing.assert_close(lhs, rhs, atol=1e-5, rtol=1e-5)


def test_gradients_match_finite_differences(tiny_cond, clip):
    cond = Conditioner(tiny_cond)
    cond.apply_lora(LoraConfig(rank=2, alpha=2, dropout=0.0))
    cond = cond.double().eval()
    # give the zero-initialised B factor a value so its A partner has a gradient
    with torch.no_grad():
        cond.layers[0].attn.q.lora_B.weight.normal_(0, 0.1)
    frames = torch.from_numpy(clip.frames.transpose(0, 3, 1, 2).copy())[None]
    w = torch.randn(1, 3, 4, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

    def loss():
        return (cond(frames, ["recolor the square"]) * w).sum()

    params = {
        "queries": cond.queries,
        "alignment": cond.alignment.proj.weight,
        "lora_A": cond.layers[0].attn.q.lora_A.weight,
        "lora_B": cond.layers[0].attn.v.lora_B.weight,
    }
    cond.zero_grad()
    loss().backward()
    h = 1e-6
    for name, p in params.items():
        grad = p.grad.clone()
        assert grad.abs().max() > 0, name
        flat = p.data.view(-1)
        for idx in torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(1))[:4]:
            old = flat[idx].item()
            flat[idx] = old + h
            up = loss().item()
            flat[idx] = old - h
            down = loss().item()
            flat[idx] = old
            fd = (up - down) / (2 * h)
            an = grad.view(-1)[idx].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), (name, fd, an)


def test_pca_axis_aligned():
    res = pca(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]]), 2)
    np.testing.assert_allclose(np.abs(res.axes[0]), [1.0, 0.0], atol=1e-12)


def test_pca_orthonormal_and_reconstruction_bound(rng):
    x = rng.standard_normal((40, 6)) @ rng.standard_normal((6, 6))
    res = pca(x, 2)
    np.testing.assert_allclose(res.axes @ res.axes.T, np.eye(2), atol=1e-6)
    evals = np.sort(np.linalg.eigvalsh(np.cov(x.T, bias=True)))[::-1]
    assert res.reconstruction_error(x) <= np.trace(np.cov(x.T, bias=True)) - evals[:2].sum() + 1e-9


def test_pca_needs_two_samples():
    with pytest.raises(InsufficientData):
        pca(np.zeros((1, 3)))


def _sample(frames, text, skill):
    return InstructionSample(VideoClip(frames), text, skill, target=VideoClip(frames))


def test_projection_identical_samples_collapse(tiny_cond, rng):
    cond = Conditioner(tiny_cond)
    frames = rng.random((2, 8, 8, 3))
    proj = export_query_projection(cond, [_sample(frames, "make it sepia", Skill.STYLIZATION)] * 10)
    pts = np.array([(x, y) for _, x, y in proj.rows])
    assert len(pts) == 10
    np.testing.assert_allclose(pts, pts[:1].repeat(10, 0), atol=1e-9)
    csv = proj.to_csv().splitlines()
    assert csv[0] == "skill,x,y" and csv[1].startswith("stylization,")
    with pytest.raises(InsufficientData):
        export_query_projection(cond, [_sample(frames, "x", Skill.STYLIZATION)])
