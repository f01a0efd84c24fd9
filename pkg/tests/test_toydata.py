import hashlib

import numpy as np
import pytest

from veggie.errors import GenerationError, ShapeError
from veggie.media import MaskVideo, Skill, VideoClip, load_manifest
from veggie.toydata import (
    BACKGROUNDS,
    DEFAULT_FILL,
    PALETTE,
    TEMPLATES,
    FillSpec,
    SceneConfig,
    Shape,
    ShapeScene,
    draw_skills,
    fill_to_mask,
    generate,
    generate_bank,
    mask_to_fill,
    write_toy_dataset,
)


def _cfg(*shapes, **kw):
    return SceneConfig(shapes=list(shapes), background=kw.pop("background", "black"), **kw)


def test_fill_colour_is_far_from_palette():
    assert DEFAULT_FILL.fill_color == (0.0, 1.0, 0.0)
    for rgb in list(PALETTE.values()) + list(BACKGROUNDS.values()):
        assert DEFAULT_FILL.distance(rgb) >= 96 / 255


def test_grounding_single_red_square():
    sq = Shape("square", "red", 8.0, (10.0, 12.0), (1.0, 0.0))
    g = generate(np.random.default_rng(0), Skill.GROUNDING, _cfg(sq))
    s = g.sample
    fp = np.stack([sq.footprint(t, 32, 32) for t in range(8)])
    assert np.array_equal(s.gt_mask.masks, fp)
    expected = s.source.frames.copy()
    expected[fp] = DEFAULT_FILL.fill_color
    assert np.array_equal(s.target.frames, expected)
    assert "red square" in s.instruction and "green" in s.instruction


def test_stylization_invert_closed_form():
    g = generate(np.random.default_rng(3), Skill.STYLIZATION, SceneConfig(style="invert"))
    np.testing.assert_array_equal(g.sample.target.frames, 1.0 - g.sample.source.frames)


def test_reasoning_fastest_picks_argmax_speed():
    slow = Shape("circle", "blue", 7.0, (6.0, 8.0), (1.0, 0.0))
    fast = Shape("square", "yellow", 7.0, (5.0, 24.0), (3.0, 0.0))
    for seed in range(40):
        g = generate(np.random.default_rng(seed), Skill.REASONING, _cfg(slow, fast))
        if g.meta["question_kind"] == "fastest":
            break
    else:
        pytest.fail("no fastest question drawn")
    fp = np.stack([fast.footprint(t, 32, 32) for t in range(8)])
    assert g.referent == 1
    assert np.array_equal(g.sample.gt_mask.masks, fp)


def test_every_skill_generates_and_differs():
    rng = np.random.default_rng(11)
    for skill in Skill:
        s = generate(rng, skill).sample
        assert s.skill is skill
        assert s.source.shape == s.target.shape == (8, 32, 32, 3)
        assert not np.array_equal(s.source.frames, s.target.frames), skill
        assert (s.gt_mask is not None) == (skill in (Skill.GROUNDING, Skill.REASONING))


def test_removal_of_non_removable_raises():
    sq = Shape("square", "red", 8.0, (10.0, 12.0), removable=False)
    with pytest.raises(GenerationError):
        generate(np.random.default_rng(0), Skill.REMOVAL, _cfg(sq))


def test_removal_inpaints_background_exactly():
    a = Shape("square", "red", 8.0, (8.0, 8.0))
    b = Shape("circle", "blue", 8.0, (22.0, 22.0))
    g = generate(np.random.default_rng(0), Skill.REMOVAL, _cfg(a, b, background="gray"))
    gone = g.scene.shapes[g.referent]
    fp = gone.footprint(0, 32, 32)
    np.testing.assert_array_equal(g.sample.target.frames[0][fp], np.broadcast_to(BACKGROUNDS["gray"], (fp.sum(), 3)))


def test_scene_stays_in_canvas():
    with pytest.raises(GenerationError):
        ShapeScene([Shape("square", "red", 8.0, (3.0, 16.0))])
    with pytest.raises(GenerationError):
        ShapeScene([])


def test_templates_have_paraphrases():
    assert all(len(v) >= 8 for v in TEMPLATES.values())


def test_generator_deterministic():
    a = generate_bank(6, seed=42)
    b = generate_bank(6, seed=42)
    for x, y in zip(a, b):
        assert x.sample.instruction == y.sample.instruction
        assert x.sample.source.frames.tobytes() == y.sample.source.frames.tobytes()
        assert x.sample.target.frames.tobytes() == y.sample.target.frames.tobytes()


def test_skill_marginals():
    n = 10_000
    counts = {s: 0 for s in Skill}
    for s in draw_skills(np.random.default_rng(0), list(Skill), n):
        counts[s] += 1
    sigma = np.sqrt(n * (1 / 8) * (7 / 8))
    assert all(abs(c - n / 8) < 3 * sigma for c in counts.values())
    assert draw_skills(None, ["removal", "grounding"], 4, balanced=True) == [Skill.REMOVAL, Skill.GROUNDING] * 2


def test_mask_fill_identities(rng):
    clip = VideoClip(rng.random((2, 4, 4, 3)))
    zero = MaskVideo(np.zeros((2, 4, 4), bool))
    assert np.array_equal(mask_to_fill(clip, zero).frames, clip.frames)
    ones = MaskVideo(np.ones((2, 4, 4), bool))
    assert np.all(mask_to_fill(clip, ones).frames == np.array([0.0, 1.0, 0.0]))
    with pytest.raises(ShapeError):
        mask_to_fill(clip, MaskVideo(np.zeros((2, 4, 5), bool)))


def test_fill_to_mask_tolerance():
    frames = np.zeros((1, 1, 3, 3))
    frames[0, 0, 0] = (0.0, 1.0, 0.0)
    frames[0, 0, 1] = (59 / 255, 1 - 59 / 255, 59 / 255)
    frames[0, 0, 2] = PALETTE["yellow"]
    m = fill_to_mask(VideoClip(frames), FillSpec(tolerance=60 / 255)).masks
    assert m.tolist() == [[[True, True, False]]]


@pytest.mark.parametrize("tol", [10, 30, 47])
def test_fill_mask_roundtrip_on_synthetic_clips(tol):
    spec = FillSpec(tolerance=tol / 255)
    rng = np.random.default_rng(tol)
    for skill in (Skill.GROUNDING, Skill.REASONING):
        for _ in range(5):
            s = generate(rng, skill, SceneConfig(fill=spec)).sample
            assert np.array_equal(fill_to_mask(s.target, spec).masks, s.gt_mask.masks)


def test_write_toy_dataset_byte_stable(tmp_path):
    def digest(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(root)).encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    write_toy_dataset(tmp_path / "a", 5, seed=7)
    write_toy_dataset(tmp_path / "b", 5, seed=7)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    m = load_manifest(tmp_path / "a" / "manifest.json")
    assert len(m.records) == 5
    assert m.load_sample(m.records[0]).target is not None
