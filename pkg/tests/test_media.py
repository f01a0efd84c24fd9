import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veggie.errors import DimensionMismatch, InvalidSampleCount, IoError, ManifestError, MissingFrame, ShapeError
from veggie.media import (
    DatasetManifest,
    InstructionSample,
    ManifestRecord,
    MaskVideo,
    Skill,
    VideoClip,
    load_clip,
    load_manifest,
    load_mask,
    sample_frames_uniform,
    save_clip,
    save_mask,
    uniform_indices,
)


def test_clip_validation():
    with pytest.raises(ShapeError):
        VideoClip(np.zeros((2, 4, 4, 2)))
    with pytest.raises(ValueError):
        VideoClip(np.full((1, 4, 4, 3), 1.5))
    clip = VideoClip(np.zeros((3, 4, 5)))
    assert clip.shape == (3, 4, 5, 1)
    with pytest.raises(ValueError):
        clip.frames[0, 0, 0, 0] = 1.0


def test_roundtrip_is_exact_at_8_bit(tmp_path, rng):
    u8 = rng.integers(0, 256, size=(4, 6, 7, 3))
    clip = VideoClip(u8 / 255.0, fps=Fraction(30000, 1001))
    save_clip(clip, tmp_path / "c")
    back = load_clip(tmp_path / "c")
    assert np.array_equal(back.to_uint8(), u8)
    assert back.fps == Fraction(30000, 1001)
    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    assert meta["n"] == 4 and meta["C"] == 3


def test_missing_frame_reports_index(tmp_path, rng):
    save_clip(VideoClip(rng.random((5, 4, 4, 3))), tmp_path / "c")
    (tmp_path / "c" / "frame_00002.png").unlink()
    with pytest.raises(MissingFrame) as exc:
        load_clip(tmp_path / "c")
    assert exc.value.index == 2


def test_mixed_frame_sizes(tmp_path, rng):
    save_clip(VideoClip(rng.random((2, 4, 4, 3))), tmp_path / "a")
    save_clip(VideoClip(rng.random((1, 5, 4, 3))), tmp_path / "b")
    (tmp_path / "b" / "frame_00000.png").rename(tmp_path / "a" / "frame_00002.png")
    with pytest.raises(DimensionMismatch):
        load_clip(tmp_path / "a")


def test_load_from_missing_dir(tmp_path):
    with pytest.raises(IoError):
        load_clip(tmp_path / "nope")


def test_mask_roundtrip(tmp_path, rng):
    m = MaskVideo(rng.random((3, 5, 6)) > 0.5)
    save_mask(m, tmp_path / "m")
    assert np.array_equal(load_mask(tmp_path / "m").masks, m.masks)


def test_uniform_indices_pinned():
    assert uniform_indices(15, 8) == [0, 2, 4, 6, 8, 10, 12, 14]
    # 1.5 and 4.5 round up, not to even
    assert uniform_indices(7, 5) == [0, 2, 3, 5, 6]
    with pytest.raises(InvalidSampleCount):
        uniform_indices(4, 5)
    with pytest.raises(InvalidSampleCount):
        uniform_indices(4, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 60), st.data())
def test_uniform_indices_properties(n, data):
    k = data.draw(st.integers(1, n))
    idx = uniform_indices(n, k)
    assert len(idx) == k
    assert idx[0] == 0
    if k > 1:
        assert idx[-1] == n - 1
        assert all(a < b for a, b in zip(idx, idx[1:]))
    if k == n:
        assert idx == list(range(n))


def test_sample_frames_idempotent(rng):
    clip = VideoClip(rng.random((6, 2, 2, 3)))
    assert np.array_equal(sample_frames_uniform(clip, 6).frames, clip.frames)


def test_segmentation_samples_need_masks(rng):
    src = VideoClip(rng.random((2, 4, 4, 3)))
    with pytest.raises(ValueError):
        InstructionSample(src, "paint the red square green", Skill.GROUNDING)


def test_manifest_roundtrip(tmp_path, rng):
    save_clip(VideoClip(rng.random((2, 4, 4, 3))), tmp_path / "s")
    m = DatasetManifest([ManifestRecord("a", Skill.REMOVAL, "remove the red square", "s", "s")], root=tmp_path)
    m.save(tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert back.records == m.records
    sample = back.load_sample(back.records[0])
    assert sample.skill is Skill.REMOVAL and sample.target is not None


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        DatasetManifest([ManifestRecord("a", Skill.REMOVAL, "x", "s"), ManifestRecord("a", Skill.REMOVAL, "y", "s")])
    (tmp_path / "bad.json").write_text(json.dumps({"version": "other", "records": []}))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "bad.json")
    with pytest.raises(ManifestError):
        Skill.parse("juggling")
