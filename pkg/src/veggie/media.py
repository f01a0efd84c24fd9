"""Core media types, PNG frame-directory I/O and dataset manifests.

Videos live on disk as a directory of ``frame_00000.png ...`` files plus a
``meta.json``.  In memory, intensities are float arrays in [0, 1]; 8-bit
quantization happens only at the file boundary.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatch,
    InvalidSampleCount,
    IoError,
    ManifestError,
    MissingFrame,
    ShapeError,
)

MANIFEST_VERSION = "veggie-manifest/1"
FRAME_PATTERN = re.compile(r"^frame_(\d{5})\.png$")


class Skill(str, enum.Enum):
    ADDITION = "addition"
    REMOVAL = "removal"
    OBJECT_CHANGE = "object_change"
    ENV_CHANGE = "env_change"
    VISUAL_FEATURE = "visual_feature"
    STYLIZATION = "stylization"
    GROUNDING = "grounding"
    REASONING = "reasoning"

    @classmethod
    def parse(cls, value: "str | Skill") -> "Skill":
        try:
            return cls(value)
        except ValueError:
            raise ManifestError(f"unknown skill {value!r}") from None

    @property
    def is_segmentation(self) -> bool:
        return self in (Skill.GROUNDING, Skill.REASONING)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class VideoClip:
    """``n x H x W x C`` float frames in [0, 1] plus a frame rate."""

    frames: np.ndarray
    fps: Fraction = Fraction(8)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise ShapeError(f"expected n x H x W x C frames, got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise ShapeError("a clip needs at least one frame")
        if frames.shape[-1] not in (1, 3):
            raise ShapeError(f"channel count must be 1 or 3, got {frames.shape[-1]}")
        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("frame intensities must be finite and within [0, 1]")
        fps = Fraction(self.fps).limit_denominator(1_000_000)
        if fps <= 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "fps", fps)

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]

    @property
    def C(self) -> int:
        return self.frames.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    def with_frames(self, frames: np.ndarray) -> "VideoClip":
        return VideoClip(frames, self.fps)

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.frames * 255.0).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class MaskVideo:
    masks: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise ShapeError(f"expected n x H x W masks, got shape {masks.shape}")
        if masks.dtype != bool:
            if not np.all((masks == 0) | (masks == 1)):
                raise ValueError("mask values must be 0 or 1")
            masks = masks.astype(bool)
        object.__setattr__(self, "masks", _frozen(masks))

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.masks.shape

    def check_pairs(self, clip: VideoClip) -> None:
        if self.masks.shape != clip.frames.shape[:3]:
            raise ShapeError(f"mask shape {self.masks.shape} does not match clip {clip.frames.shape[:3]}")


@dataclass(frozen=True, eq=False)
class InstructionSample:
    source: VideoClip
    instruction: str
    skill: Skill
    target: VideoClip | None = None
    gt_mask: MaskVideo | None = None
    references: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "skill", Skill.parse(self.skill))
        object.__setattr__(self, "references", tuple(self.references))
        if self.skill.is_segmentation and self.gt_mask is None:
            raise ValueError(f"{self.skill.value} samples must carry a gt_mask")
        if self.gt_mask is not None:
            self.gt_mask.check_pairs(self.source)
        if self.target is not None and self.target.shape != self.source.shape:
            raise ShapeError("target and source clips differ in shape")


# -- frame directories -------------------------------------------------------


def _frame_name(i: int) -> str:
    return f"frame_{i:05d}.png"


def _scan_frames(dir_path: Path) -> list[Path]:
    if not dir_path.is_dir():
        raise IoError(f"not a directory: {dir_path}")
    indexed = {}
    for p in dir_path.iterdir():
        m = FRAME_PATTERN.match(p.name)
        if m:
            indexed[int(m.group(1))] = p
    if not indexed:
        raise MissingFrame(0, dir_path)
    for i in range(max(indexed) + 1):
        if i not in indexed:
            raise MissingFrame(i, dir_path)
    return [indexed[i] for i in range(len(indexed))]


def _read_png_stack(paths: Sequence[Path]) -> np.ndarray:
    arrays = []
    for p in paths:
        with Image.open(p) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arrays.append(np.asarray(im, dtype=np.uint8))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DimensionMismatch(f"frames have mixed dimensions: {sorted(shapes)}")
    return np.stack(arrays)


def load_clip(dir_path) -> VideoClip:
    dir_path = Path(dir_path)
    data = _read_png_stack(_scan_frames(dir_path))
    fps = Fraction(8)
    meta = dir_path / "meta.json"
    if meta.exists():
        fps = Fraction(str(json.loads(meta.read_text())["fps"]))
    return VideoClip(data.astype(np.float64) / 255.0, fps)


def _fps_json(fps: Fraction):
    return fps.numerator if fps.denominator == 1 else float(fps)


def _write_frames(frames_u8: np.ndarray, dir_path: Path, meta: dict) -> None:
    try:
        dir_path.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames_u8):
            mode = "L" if frame.ndim == 2 else "RGB"
            Image.fromarray(frame, mode=mode).save(dir_path / _frame_name(i), format="PNG")
        (dir_path / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write clip to {dir_path}: {exc}") from exc


def save_clip(clip: VideoClip, dir_path) -> None:
    u8 = clip.to_uint8()
    if clip.C == 1:
        u8 = u8[..., 0]
    meta = {"n": clip.n, "H": clip.H, "W": clip.W, "C": clip.C, "fps": _fps_json(clip.fps)}
    _write_frames(u8, Path(dir_path), meta)


def save_mask(mask: MaskVideo, dir_path) -> None:
    n, h, w = mask.shape
    meta = {"n": n, "H": h, "W": w, "C": 1, "kind": "mask"}
    _write_frames(mask.masks.astype(np.uint8) * 255, Path(dir_path), meta)


def load_mask(dir_path) -> MaskVideo:
    data = _read_png_stack(_scan_frames(Path(dir_path)))
    if data.ndim == 4:
        data = data[..., 0]
    return MaskVideo(data > 127)


def sample_frames_uniform(clip: VideoClip, k: int) -> VideoClip:
    """Pick ``k`` frames evenly spread over the clip, keeping both endpoints."""
    idx = uniform_indices(clip.n, k)
    return clip.with_frames(clip.frames[idx])


def uniform_indices(n: int, k: int) -> list[int]:
    if k < 1 or k > n:
        raise InvalidSampleCount(f"cannot sample {k} frames from a {n}-frame clip")
    if k == 1:
        return [0]
    # round half up, not banker's rounding
    return [int(math.floor(i * (n - 1) / (k - 1) + 0.5)) for i in range(k)]


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    skill: Skill
    instruction: str
    source_dir: str
    target_dir: str | None = None
    mask_dir: str | None = None
    provenance: str = "unknown"

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "skill": self.skill.value,
            "instruction": self.instruction,
            "source_dir": self.source_dir,
            "provenance": self.provenance,
        }
        if self.target_dir is not None:
            out["target_dir"] = self.target_dir
        if self.mask_dir is not None:
            out["mask_dir"] = self.mask_dir
        return out


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    version: str = MANIFEST_VERSION
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_sample(self, rec: ManifestRecord) -> InstructionSample:
        target = self.resolve(rec.target_dir)
        mask = self.resolve(rec.mask_dir)
        return InstructionSample(
            source=load_clip(self.resolve(rec.source_dir)),
            instruction=rec.instruction,
            skill=rec.skill,
            target=load_clip(target) if target else None,
            gt_mask=load_mask(mask) if mask else None,
        )

    def by_id(self) -> dict[str, ManifestRecord]:
        return {r.id: r for r in self.records}

    def to_json(self) -> dict:
        return {"version": self.version, "records": [r.to_json() for r in self.records]}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_manifest(path, check_dirs: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    records = []
    for raw in doc.get("records", []):
        try:
            records.append(
                ManifestRecord(
                    id=str(raw["id"]),
                    skill=Skill.parse(raw["skill"]),
                    instruction=raw["instruction"],
                    source_dir=raw["source_dir"],
                    target_dir=raw.get("target_dir"),
                    mask_dir=raw.get("mask_dir"),
                    provenance=raw.get("provenance", "unknown"),
                )
            )
        except KeyError as exc:
            raise ManifestError(f"record missing field {exc}") from None
    manifest = DatasetManifest(records, doc["version"], root=path.parent)
    if check_dirs:
        for rec in records:
            for rel in (rec.source_dir, rec.target_dir, rec.mask_dir):
                p = manifest.resolve(rel)
                if p is not None and not p.is_dir():
                    raise ManifestError(f"record {rec.id!r}: directory {p} does not exist")
    return manifest
