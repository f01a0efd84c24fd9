"""Instructional video-pair synthesis: caption, animation prompt, animate,
first-frame-conditioned edit propagation, then quality filtering.

Each stage talks to a pluggable backend.  Deterministic mocks are provided
for all five so the orchestrator runs offline; :class:`RemoteBackends`
forwards the same calls over the JSON contract in :mod:`veggie.remote`.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import BackendError, IoError, ManifestError, ShapeError, StageError
from .media import DatasetManifest, ManifestRecord, Skill, VideoClip, save_clip
from .prompts import animation_prompt, caption_prompt
from .remote import RemoteClient

log = logging.getLogger(__name__)

STAGES = ("caption", "animation_prompt", "animate", "propagate", "score")


# -- reports and filtering ---------------------------------------------------


@dataclass(frozen=True)
class QualityReport:
    aesthetic: float
    imaging: float
    motion_smoothness: float
    subject_consistency: float
    background_consistency: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            hi = 100.0 if f.name == "imaging" else 1.0
            if not (np.isfinite(v) and 0.0 <= v <= hi):
                raise ValueError(f"{f.name}={v} outside [0, {hi:g}]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FilterThresholds:
    aesthetic_min: float = 0.6
    imaging_min: float = 65.0
    smoothness_min: float = 0.9
    subject_min: float = 0.9
    background_min: float = 0.9

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            hi = 100.0 if f.name == "imaging_min" else 1.0
            if not 0.0 <= v <= hi:
                raise ValueError(f"{f.name}={v} outside [0, {hi:g}]")

    def pairs(self):
        yield "aesthetic", self.aesthetic_min
        yield "imaging", self.imaging_min
        yield "motion_smoothness", self.smoothness_min
        yield "subject_consistency", self.subject_min
        yield "background_consistency", self.background_min


@dataclass(frozen=True)
class FilterReason:
    clip: str
    metric: str
    value: float
    threshold: float

    def __str__(self):
        return f"{self.clip}: {self.metric}<{self.threshold:g} (got {self.value:g})"


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reasons: tuple[FilterReason, ...] = ()

    def __bool__(self):
        return self.accepted


def filter_pair(reports: dict[str, QualityReport], thresholds: FilterThresholds = FilterThresholds()) -> FilterDecision:
    """Accept iff every metric of every clip in ``reports`` meets its threshold."""
    reasons = []
    for clip in sorted(reports):
        rep = reports[clip]
        for metric, thr in thresholds.pairs():
            value = getattr(rep, metric)
            if not value >= thr:
                reasons.append(FilterReason(clip, metric, value, thr))
    return FilterDecision(not reasons, tuple(reasons))


# -- quality proxies ---------------------------------------------------------

_LAPLACE = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float64)


def luma(frames: np.ndarray) -> np.ndarray:
    if frames.shape[-1] == 1:
        return frames[..., 0]
    return frames @ np.array([0.299, 0.587, 0.114])


def smoothness_proxy(clip: VideoClip) -> float:
    """Mean cosine of adjacent flattened frames, clipped to [0, 1]."""
    if clip.n < 2:
        return 1.0
    x = clip.frames.reshape(clip.n, -1)
    a, b = x[:-1], x[1:]
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    cos = np.where(den > 0, num / np.maximum(den, 1e-12), 1.0)
    return float(np.clip(cos.mean(), 0.0, 1.0))


def noise_sigma(gray: np.ndarray) -> float:
    """Immerkaer's fast noise estimate for one grayscale frame."""
    h, w = gray.shape
    if h < 3 or w < 3:
        return 0.0
    resp = ndimage.convolve(gray, _LAPLACE, mode="reflect")[1:-1, 1:-1]
    return float(np.sqrt(np.pi / 2) * np.abs(resp).sum() / (6.0 * (h - 2) * (w - 2)))


def imaging_proxy(clip: VideoClip) -> float:
    sigma = np.mean([noise_sigma(g) for g in luma(clip.frames)])
    return float(np.clip(100.0 * (1.0 - sigma), 0.0, 100.0))


def aesthetic_proxy(clip: VideoClip) -> float:
    """0.4 + 1.5 * luma contrast + 0.5 * mean saturation, clipped to [0, 1]."""
    f = clip.frames
    contrast = float(luma(f).std(axis=(1, 2)).mean())
    sat = float((f.max(axis=-1) - f.min(axis=-1)).mean()) if f.shape[-1] == 3 else 0.0
    return float(np.clip(0.4 + 1.5 * contrast + 0.5 * sat, 0.0, 1.0))


def foreground_split(frame: np.ndarray, tol: float = 0.1) -> np.ndarray:
    """Pixels farther than ``tol`` (max-channel) from the frame's median colour."""
    median = np.median(frame.reshape(-1, frame.shape[-1]), axis=0)
    return np.max(np.abs(frame - median), axis=-1) > tol


def _histogram(pixels: np.ndarray, bins: int = 8) -> np.ndarray | None:
    if len(pixels) == 0:
        return None
    idx = np.minimum((pixels * bins).astype(int), bins - 1)
    h = np.concatenate([np.bincount(idx[:, c], minlength=bins) for c in range(pixels.shape[1])])
    return h / h.sum()


def _hist_overlap(a, b) -> float:
    if a is None and b is None:
        return 1.0
    if a is None or b is None:
        return 0.0
    return float(np.minimum(a, b).sum())


def consistency_proxies(clip: VideoClip) -> tuple[float, float]:
    """Histogram overlap of each frame's foreground / background against frame 0."""
    f = clip.frames
    masks = [foreground_split(x) for x in f]
    fg0, bg0 = _histogram(f[0][masks[0]]), _histogram(f[0][~masks[0]])
    subj, back = [], []
    for x, m in zip(f[1:], masks[1:]):
        subj.append(_hist_overlap(fg0, _histogram(x[m])))
        back.append(_hist_overlap(bg0, _histogram(x[~m])))
    if not subj:
        return 1.0, 1.0
    return float(np.clip(np.mean(subj), 0, 1)), float(np.clip(np.mean(back), 0, 1))


# -- backend interfaces ------------------------------------------------------


class Captioner(Protocol):
    def caption(self, image: np.ndarray, prompt: str, seed: int) -> str: ...


class AnimationPrompter(Protocol):
    def animation_prompt(self, image: np.ndarray, prompt: str, caption: str, seed: int) -> str: ...


class Animator(Protocol):
    def animate(self, image: np.ndarray, prompt: str, seed: int) -> VideoClip: ...


class EditPropagator(Protocol):
    def propagate(self, source: VideoClip, edited_first_frame: np.ndarray, seed: int) -> VideoClip: ...


class QualityScorer(Protocol):
    def score(self, clip: VideoClip) -> QualityReport: ...


_COLOR_WORDS = {
    "red": (1, 0, 0), "green": (0, 1, 0), "blue": (0, 0, 1), "yellow": (1, 1, 0),
    "white": (1, 1, 1), "black": (0, 0, 0), "magenta": (1, 0, 1), "orange": (1, 0.5, 0),
    "purple": (0.5, 0, 1), "gray": (0.5, 0.5, 0.5),
}
DIRECTIONS = {"right": (0, 1), "left": (0, -1), "down": (1, 0), "up": (-1, 0)}


def _color_name(rgb) -> str:
    names = list(_COLOR_WORDS)
    d = [np.abs(np.asarray(_COLOR_WORDS[k]) - rgb).max() for k in names]
    return names[int(np.argmin(d))]


class MockCaptioner:
    """Names the dominant background colour and the colours standing out from it."""

    def caption(self, image, prompt, seed=0):
        image = np.asarray(image, dtype=np.float64)
        fg = foreground_split(image)
        bg = _color_name(np.median(image.reshape(-1, image.shape[-1]), axis=0))
        colours = sorted({_color_name(p) for p in image[fg].reshape(-1, image.shape[-1])[:: max(1, fg.sum() // 64)]})
        if not colours:
            return f"A plain {bg} background"
        return f"{', '.join(c.capitalize() for c in colours)} shapes on a {bg} background"


class MockAnimationPrompter:
    """Picks a pan direction from the seed."""

    def animation_prompt(self, image, prompt, caption, seed=0):
        direction = sorted(DIRECTIONS)[np.random.default_rng(seed).integers(len(DIRECTIONS))]
        return f"{caption} as the camera pans slowly {direction}."


@dataclass
class MockAnimator:
    """Global linear pan (wrap-around), one pixel per frame; frame 0 is the input image."""

    frames: int = 8
    speed: int = 1

    def animate(self, image, prompt, seed=0):
        image = np.asarray(image, dtype=np.float64)
        m = re.search(r"\b(right|left|up|down)\b", prompt or "")
        dy, dx = DIRECTIONS[m.group(1) if m else "right"]
        out = [np.roll(image, (dy * k * self.speed, dx * k * self.speed), axis=(0, 1)) for k in range(self.frames)]
        return VideoClip(np.stack(out))


class MockEditPropagator:
    """Adds the frame-0 edit delta to every source frame (clipped); frame 0 is the edited image."""

    def propagate(self, source, edited_first_frame, seed=0):
        edited = np.asarray(edited_first_frame, dtype=np.float64)
        if edited.ndim == 2:
            edited = edited[..., None]
        delta = edited - source.frames[0]
        frames = np.clip(source.frames + delta, 0.0, 1.0)
        frames[0] = edited
        return source.with_frames(frames)


class MockQualityScorer:
    def score(self, clip):
        subj, back = consistency_proxies(clip)
        return QualityReport(
            aesthetic=aesthetic_proxy(clip),
            imaging=imaging_proxy(clip),
            motion_smoothness=smoothness_proxy(clip),
            subject_consistency=subj,
            background_consistency=back,
        )


@dataclass
class Backends:
    captioner: Captioner
    prompter: AnimationPrompter
    animator: Animator
    propagator: EditPropagator
    scorer: QualityScorer

    @classmethod
    def mock(cls, frames: int = 8) -> "Backends":
        return cls(MockCaptioner(), MockAnimationPrompter(), MockAnimator(frames), MockEditPropagator(),
                   MockQualityScorer())

    @classmethod
    def remote(cls, endpoint: str, timeout: float = 60.0, max_concurrency: int = 4) -> "Backends":
        r = RemoteBackends(RemoteClient(endpoint, timeout, max_concurrency))
        return cls(r, r, r, r, r)


class RemoteBackends:
    """All five stage interfaces over one :class:`~veggie.remote.RemoteClient`."""

    def __init__(self, client: RemoteClient):
        self.client = client

    def caption(self, image, prompt, seed=0):
        return self.client.text("caption", text=prompt, arrays={"image": image}, seed=seed)

    def animation_prompt(self, image, prompt, caption, seed=0):
        return self.client.text("animation_prompt", text=f"{prompt}\n\nCaption: {caption}",
                                arrays={"image": image}, seed=seed)

    def animate(self, image, prompt, seed=0):
        return VideoClip(self.client.array("animate", text=prompt, arrays={"image": image}, seed=seed))

    def propagate(self, source, edited_first_frame, seed=0):
        frames = self.client.array("propagate", arrays={"source": source.frames, "edited": edited_first_frame},
                                   seed=seed)
        return source.with_frames(frames)

    def score(self, clip):
        reply = self.client.call("quality_report", arrays={"frames": clip.frames})
        try:
            return QualityReport(**{f.name: float(reply["values"][f.name]) for f in fields(QualityReport)})
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"quality_report: malformed reply ({exc})") from exc


# -- orchestration -----------------------------------------------------------


@dataclass
class SynthesizedPair:
    source: VideoClip
    target: VideoClip
    reports: dict[str, QualityReport]
    caption: str
    animation_prompt: str
    instruction: str = ""


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got shape {img.shape}")
    return img


def synthesize_pair(image, edited_image, instruction: str, backends: Backends, seed: int = 0) -> SynthesizedPair:
    image, edited = _as_image(image), _as_image(edited_image)
    if image.shape != edited.shape:
        raise ShapeError(f"image {image.shape} and edited image {edited.shape} differ")
    cap = _stage("caption", backends.captioner.caption, image, caption_prompt(), seed)
    anim = _stage("animation_prompt", backends.prompter.animation_prompt, image, animation_prompt(), cap, seed)
    source = _stage("animate", backends.animator.animate, image, anim, seed)
    if source.frames.shape[1:] != image.shape:
        raise StageError("animate", ShapeError(f"animator returned frames {source.frames.shape[1:]}"))
    target = _stage("propagate", backends.propagator.propagate, source, edited, seed)
    if target.shape != source.shape:
        raise StageError("propagate", ShapeError(f"propagator returned {target.shape}, expected {source.shape}"))
    reports = {
        "source": _stage("score", backends.scorer.score, source),
        "target": _stage("score", backends.scorer.score, target),
    }
    return SynthesizedPair(source, target, reports, cap, anim, instruction)


@dataclass
class PairRequest:
    id: str
    image: np.ndarray
    edited: np.ndarray
    instruction: str
    skill: Skill = Skill.VISUAL_FEATURE


@dataclass
class SynthesisResult:
    manifest: DatasetManifest
    accepted: list[str] = field(default_factory=list)
    rejected: dict[str, list[str]] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"accepted": self.accepted, "rejected": self.rejected, "failed": self.failed}


def synthesize_dataset(requests: Sequence[PairRequest], backends: Backends, out_dir, seed: int = 0,
                       thresholds: FilterThresholds = FilterThresholds(), fps=Fraction(8)) -> SynthesisResult:
    """Run every request; write accepted pairs and a manifest under ``out_dir``.

    Pairs are processed in order.  A failed or rejected pair writes nothing.
    """
    out_dir = Path(out_dir)
    records, result = [], SynthesisResult(DatasetManifest([], root=out_dir))
    for k, req in enumerate(requests):
        try:
            pair = synthesize_pair(req.image, req.edited, req.instruction, backends, seed + k)
        except (StageError, ShapeError) as exc:
            log.warning("pair %s failed: %s", req.id, exc)
            result.failed[req.id] = str(exc)
            continue
        decision = filter_pair(pair.reports, thresholds)
        if not decision:
            result.rejected[req.id] = [str(r) for r in decision.reasons]
            continue
        base = Path("samples") / req.id
        save_clip(VideoClip(pair.source.frames, fps), out_dir / base / "source")
        save_clip(VideoClip(pair.target.frames, fps), out_dir / base / "target")
        records.append(ManifestRecord(req.id, req.skill, req.instruction, str(base / "source"),
                                      str(base / "target"), None, f"synth seed={seed + k}; caption={pair.caption}"))
        result.accepted.append(req.id)
    result.manifest = DatasetManifest(records, root=out_dir)
    result.manifest.save(out_dir / "manifest.json")
    return result


def load_pair_requests(path) -> list[PairRequest]:
    """Read a pairs file::

        {"pairs": [{"id": str, "image": png, "edited": png, "instruction": str, "skill": str?}]}

    Image paths are relative to the file.
    """
    from PIL import Image

    path = Path(path)
    try:
        data = json.loads(path.read_text())
        entries = data["pairs"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"cannot read pairs file {path}: {exc}") from exc

    def read(rel):
        p = Path(rel) if Path(rel).is_absolute() else path.parent / rel
        try:
            with Image.open(p) as im:
                return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise IoError(f"cannot read image {p}: {exc}") from exc

    out, seen = [], set()
    for e in entries:
        try:
            pid = str(e["id"])
            req = PairRequest(pid, read(e["image"]), read(e["edited"]), str(e["instruction"]),
                              Skill.parse(e.get("skill", Skill.VISUAL_FEATURE.value)))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed pair entry {e!r}: {exc}") from exc
        if pid in seen:
            raise ManifestError(f"duplicate pair id {pid!r}")
        seen.add(pid)
        out.append(req)
    return out
