"""Benchmark metrics: region J, boundary F, masked SSIM, embedding-based
smoothness/alignment, detection with removal inversion, and the judge.

Scores are reported on a 0-100 scale (judge: 1-10).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import BackendError, JudgeParseError, MissingOutput, ShapeError
from .media import DatasetManifest, MaskVideo, Skill, VideoClip, load_clip
from .toydata import DEFAULT_FILL, PALETTE, FillSpec, fill_to_mask, mask_to_fill

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check_masks(pred: MaskVideo, gt: MaskVideo) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


# -- region similarity -------------------------------------------------------


def jaccard_frames(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    inter = np.logical_and(pred, gt).sum(axis=(1, 2))
    union = np.logical_or(pred, gt).sum(axis=(1, 2))
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def jaccard(pred: MaskVideo, gt: MaskVideo) -> float:
    _check_masks(pred, gt)
    return float(jaccard_frames(pred.masks, gt.masks).mean() * 100.0)


# -- boundary accuracy -------------------------------------------------------


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    padded = np.pad(mask.astype(bool), 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask.astype(bool) & ~interior


def boundary_radius(h: int, w: int) -> int:
    return int(math.ceil(0.008 * math.hypot(h, w)))


def boundary_f_frame(pred: np.ndarray, gt: np.ndarray, radius: int | None = None) -> float:
    h, w = pred.shape
    r = boundary_radius(h, w) if radius is None else radius
    bp, bg = boundary_map(pred), boundary_map(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    # Euclidean distance from every pixel to the nearest boundary pixel
    dist_to_g = ndimage.distance_transform_edt(~bg)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    precision = float((dist_to_g[bp] <= r).mean())
    recall = float((dist_to_p[bg] <= r).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_f(pred: MaskVideo, gt: MaskVideo) -> float:
    _check_masks(pred, gt)
    return float(np.mean([boundary_f_frame(p, g) for p, g in zip(pred.masks, gt.masks)]) * 100.0)


# -- structural similarity ---------------------------------------------------


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable gaussian, symmetric (half-sample) boundary extension
    pad = len(g) // 2
    x = np.pad(img, ((pad, pad), (0, 0)), mode="symmetric")
    x = sum(g[k] * x[k:k + img.shape[0]] for k in range(len(g)))
    x = np.pad(x, ((0, 0), (pad, pad)), mode="symmetric")
    return sum(g[k] * x[:, k:k + img.shape[1]] for k in range(len(g)))


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    var_a = _filter(a * a, g) - mu_a ** 2
    var_b = _filter(b * b, g) - mu_b ** 2
    cov = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_frame(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_map(np.asarray(a, np.float64), np.asarray(b, np.float64)).mean())


def to_gray(frames: np.ndarray) -> np.ndarray:
    if frames.shape[-1] == 1:
        return frames[..., 0]
    return frames @ LUMA


def ssim_video(x: VideoClip, y: VideoClip) -> float:
    if x.shape != y.shape:
        raise ShapeError(f"clip shapes differ: {x.shape} vs {y.shape}")
    gx, gy = to_gray(x.frames), to_gray(y.frames)
    return float(np.mean([ssim_frame(a, b) for a, b in zip(gx, gy)]) * 100.0)


def ssim_masked(generated: VideoClip, original: VideoClip, gt_mask: MaskVideo,
                spec: FillSpec = DEFAULT_FILL) -> float:
    """SSIM of the generated clip against the original with the GT region colour-filled."""
    if generated.shape != original.shape:
        raise ShapeError(f"clip shapes differ: {generated.shape} vs {original.shape}")
    reference = mask_to_fill(original, gt_mask, spec)
    return ssim_video(generated, reference)


# -- embedding / detector / judge clients ------------------------------------


class Embedder(Protocol):
    def embed_frames(self, frames: np.ndarray) -> np.ndarray: ...
    def embed_text(self, text: str) -> np.ndarray: ...


class Detector(Protocol):
    def detect(self, frame: np.ndarray, phrase: str) -> float: ...


class JudgeClient(Protocol):
    def complete(self, prompt: str, original: VideoClip, edited: VideoClip) -> str: ...


class QualityClient(Protocol):
    def score(self, frame: np.ndarray) -> float: ...


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.sum(a * b, axis=-1) / np.maximum(na * nb, 1e-12)


def smoothness(clip: VideoClip, embedder: Embedder) -> float:
    """Mean cosine similarity of consecutive frame embeddings, x100."""
    if clip.n < 2:
        return 100.0
    try:
        emb = np.asarray(embedder.embed_frames(clip.frames), dtype=np.float64)
    except Exception as exc:
        raise BackendError(f"embedder failed: {exc}") from exc
    return float(_cos_rows(emb[1:], emb[:-1]).mean() * 100.0)


def alignment(clip: VideoClip, text: str, embedder: Embedder) -> float:
    """Mean text-frame cosine similarity, x100."""
    try:
        frames = np.asarray(embedder.embed_frames(clip.frames), dtype=np.float64)
        t = np.asarray(embedder.embed_text(text), dtype=np.float64)
    except Exception as exc:
        raise BackendError(f"embedder failed: {exc}") from exc
    return float(_cos_rows(frames, t[None]).mean() * 100.0)


def invert_score(value: float) -> float:
    """Removal-style inversion on the 0-100 scale; an involution."""
    return 100.0 - value


def detection_score(clip: VideoClip, phrase: str, detector: Detector, invert: bool = False) -> float:
    try:
        conf = [float(detector.detect(f, phrase)) for f in clip.frames]
    except Exception as exc:
        raise BackendError(f"detector failed: {exc}") from exc
    value = float(np.mean(conf) * 100.0)
    return invert_score(value) if invert else value


def quality_score(clip: VideoClip, client: QualityClient) -> float:
    try:
        return float(np.mean([client.score(f) for f in clip.frames]))
    except Exception as exc:
        raise BackendError(f"quality client failed: {exc}") from exc


OVERALL_RE = re.compile(r"Overall score \(1-10\)\s*:\s*\**\s*\[?\s*(\d+(?:\.\d+)?)")
JUDGE_CALLS = 5
JUDGE_RETRIES = 2


def parse_overall(reply: str) -> float:
    m = OVERALL_RE.search(reply or "")
    if not m:
        raise JudgeParseError("no 'Overall score (1-10):' value in reply")
    value = float(m.group(1))
    if not 1.0 <= value <= 10.0:
        raise JudgeParseError(f"overall score {value} outside 1-10")
    return value


def judge(original: VideoClip, edited: VideoClip, instruction: str, client: JudgeClient,
          calls: int = JUDGE_CALLS, retries: int = JUDGE_RETRIES) -> float:
    """Average of ``calls`` parsed overall scores; unparseable replies are retried."""
    from .prompts import judge_prompt

    prompt = judge_prompt(instruction)
    scores = []
    for _ in range(calls):
        last = None
        for _attempt in range(retries + 1):
            try:
                reply = client.complete(prompt, original, edited)
            except Exception as exc:
                raise BackendError(f"judge client failed: {exc}") from exc
            try:
                scores.append(parse_overall(reply))
                break
            except JudgeParseError as exc:
                last = exc
        else:
            raise JudgeParseError(f"judge reply unparseable after {retries} retries: {last}")
    return float(np.mean(scores))




# -- deterministic mock clients -----------------------------------------------

_KIND_WORDS = ("square", "circle", "triangle")
_PHRASE_RE = re.compile(r"\b(" + "|".join(sorted(PALETTE, key=len, reverse=True)) + r")\s+(" +
                        "|".join(_KIND_WORDS) + r")\b")


def target_phrase(instruction: str) -> str | None:
    """First ``<colour> <kind>`` mention in an instruction."""
    m = _PHRASE_RE.search(instruction.lower())
    return f"{m.group(1)} {m.group(2)}" if m else None


class PixelEmbedder:
    """Frames embed as their flattened pixels.  Text embeds as a constant image of
    the mean of the palette colours it names (mid-gray if none) with the shape of
    the most recently embedded frames."""

    def __init__(self, frame_shape: tuple[int, ...] | None = None):
        self.frame_shape = frame_shape

    def embed_frames(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        self.frame_shape = frames.shape[1:]
        return frames.reshape(len(frames), -1)

    def embed_text(self, text):
        if self.frame_shape is None:
            raise BackendError("PixelEmbedder needs a frame shape before embedding text")
        words = re.findall(r"[a-z]+", text.lower())
        cols = [PALETTE[w] for w in words if w in PALETTE]
        rgb = np.mean(cols, axis=0) if cols else np.full(3, 0.5)
        c = self.frame_shape[-1]
        px = rgb if c == 3 else np.array([rgb @ LUMA])
        return np.broadcast_to(px, self.frame_shape).reshape(-1).copy()


def classify_kind(component: np.ndarray) -> str:
    """Kind from the fill ratio of the component's bounding box.

    Only squares fill their box exactly; rasterised circles land around
    0.75-0.95 and triangles near 0.5.
    """
    ys, xs = np.nonzero(component)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    ratio = component.sum() / box
    if ratio > 0.999:
        return "square"
    if ratio > 0.65:
        return "circle"
    return "triangle"


@dataclass
class ShapeDetector:
    """Exact colour/shape matcher for moving-shapes frames: confidence 1 when a
    component of the named colour (and kind, if given) is present, else 0."""

    tolerance: float = 0.1
    min_pixels: int = 4

    def detect(self, frame, phrase):
        frame = np.asarray(frame, dtype=np.float64)
        words = phrase.lower().split()
        colour = next((w for w in words if w in PALETTE), None)
        kind = next((w for w in words if w in _KIND_WORDS), None)
        if colour is None or frame.shape[-1] != 3:
            return 0.0
        hit = np.max(np.abs(frame - np.asarray(PALETTE[colour])), axis=-1) <= self.tolerance
        labels, count = ndimage.label(hit)
        for k in range(1, count + 1):
            comp = labels == k
            if comp.sum() >= self.min_pixels and (kind is None or classify_kind(comp) == kind):
                return 1.0
        return 0.0


class HeuristicJudge:
    """Scores by how much of the clip changed: small, localised edits score
    highest, no change scores 1.  Replies in the judge template's format."""

    def complete(self, prompt, original, edited):
        diff = np.max(np.abs(original.frames - edited.frames), axis=-1) > 0.1
        frac = float(diff.mean())
        if frac == 0.0:
            score = 1
        else:
            score = int(np.clip(round(9.0 - 20.0 * abs(frac - 0.1)), 1, 10))
        return (
            "INSTRUCTION: (as given)\nEVALUATION:\n"
            f"- Accuracy score (1-10): {score}\n- Quality score (1-10): {score}\n"
            f"- Appropriateness score (1-10): {score}\n- Overall score (1-10): {score}\n\n"
            f"EXPLANATION: {frac:.1%} of pixels changed.\n"
        )


class NoiseQuality:
    """No-reference quality stand-in: 100 * (1 - estimated noise sigma)."""

    def score(self, frame):
        from .synthesis import luma, noise_sigma

        frame = np.asarray(frame, dtype=np.float64)
        return float(np.clip(100.0 * (1.0 - noise_sigma(luma(frame[None])[0])), 0.0, 100.0))


class RemoteEvalClients:
    """Embedder, detector, judge and quality roles over the JSON contract."""

    def __init__(self, client):
        self.client = client

    def embed_frames(self, frames):
        return self.client.array("embed_frames", name="embeddings", arrays={"frames": frames})

    def embed_text(self, text):
        return self.client.array("embed_text", name="embedding", text=text)

    def detect(self, frame, phrase):
        return self.client.value("detect", text=phrase, arrays={"frame": frame})

    def complete(self, prompt, original, edited):
        return self.client.text("judge", text=prompt, arrays={"original": original.frames, "edited": edited.frames})

    def score(self, frame):
        return self.client.value("image_quality", arrays={"frame": frame})


@dataclass
class Clients:
    embedder: Embedder
    detector: Detector
    judge: JudgeClient
    quality: QualityClient

    @classmethod
    def mock(cls) -> "Clients":
        return cls(PixelEmbedder(), ShapeDetector(), HeuristicJudge(), NoiseQuality())

    @classmethod
    def remote(cls, endpoint: str, timeout: float = 60.0, max_concurrency: int = 4) -> "Clients":
        from .remote import RemoteClient

        r = RemoteEvalClients(RemoteClient(endpoint, timeout, max_concurrency))
        return cls(r, r, r, r)


# -- benchmark ---------------------------------------------------------------

EDIT_METRICS = ("mllm_judge", "alignment", "smoothness", "quality")
ROUTING: dict[Skill, tuple[str, ...]] = {
    Skill.ADDITION: EDIT_METRICS + ("detection",),
    Skill.REMOVAL: EDIT_METRICS + ("detection",),
    Skill.OBJECT_CHANGE: EDIT_METRICS,
    Skill.ENV_CHANGE: EDIT_METRICS,
    Skill.VISUAL_FEATURE: EDIT_METRICS,
    Skill.STYLIZATION: EDIT_METRICS,
    Skill.GROUNDING: ("ssim", "J", "F", "JF"),
    Skill.REASONING: ("ssim", "J", "F", "JF"),
}
METRIC_ORDER = ("mllm_judge", "alignment", "smoothness", "quality", "detection", "ssim", "J", "F", "JF")


@dataclass
class MetricRow:
    id: str
    skill: str
    values: dict[str, float] = field(default_factory=dict)


@dataclass
class MetricReport:
    rows: list[MetricRow]
    meta: dict = field(default_factory=dict)

    def per_skill(self) -> dict[str, dict[str, float]]:
        out = {}
        for skill in Skill:
            rows = [r for r in self.rows if r.skill == skill.value]
            if rows:
                keys = [k for k in METRIC_ORDER if k in rows[0].values]
                out[skill.value] = {k: float(np.mean([r.values[k] for r in rows])) for k in keys}
                out[skill.value]["count"] = len(rows)
        return out

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "per_skill": self.per_skill(),
            "samples": [{"id": r.id, "skill": r.skill, **r.values} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        agg = self.per_skill()
        cols = [k for k in METRIC_ORDER if any(k in v for v in agg.values())]
        head = f"{'skill':<15}{'n':>4}" + "".join(f"{c:>12}" for c in cols)
        lines = [head, "-" * len(head)]
        for skill, vals in agg.items():
            cells = "".join(f"{vals[c]:>12.2f}" if c in vals else f"{'-':>12}" for c in cols)
            lines.append(f"{skill:<15}{vals['count']:>4}{cells}")
        return "\n".join(lines) + "\n"


def _output_for(outputs, rid: str) -> VideoClip:
    if isinstance(outputs, Mapping):
        if rid not in outputs:
            raise MissingOutput(rid)
        return outputs[rid]
    path = Path(outputs) / rid
    if not path.is_dir():
        raise MissingOutput(rid)
    return load_clip(path)


def score_sample(skill: Skill, instruction: str, original: VideoClip, edited: VideoClip,
                 gt_mask: MaskVideo | None, clients: Clients, judge_calls: int = JUDGE_CALLS) -> dict[str, float]:
    vals: dict[str, float] = {}
    for metric in ROUTING[skill]:
        if metric == "mllm_judge":
            vals[metric] = judge(original, edited, instruction, clients.judge, calls=judge_calls)
        elif metric == "alignment":
            vals[metric] = alignment(edited, instruction, clients.embedder)
        elif metric == "smoothness":
            vals[metric] = smoothness(edited, clients.embedder)
        elif metric == "quality":
            vals[metric] = quality_score(edited, clients.quality)
        elif metric == "detection":
            phrase = target_phrase(instruction) or instruction
            vals[metric] = detection_score(edited, phrase, clients.detector, invert=skill == Skill.REMOVAL)
        elif metric == "ssim":
            vals[metric] = ssim_masked(edited, original, gt_mask)
        elif metric == "J":
            vals[metric] = jaccard(fill_to_mask(edited), gt_mask)
        elif metric == "F":
            vals[metric] = boundary_f(fill_to_mask(edited), gt_mask)
        elif metric == "JF":
            vals[metric] = (vals["J"] + vals["F"]) / 2.0
    return vals


def run_bench(manifest: DatasetManifest, outputs, clients: Clients, judge_calls: int = JUDGE_CALLS,
              seeds: Sequence[int] = ()) -> MetricReport:
    """Score each record's edited clip with the metrics routed to its skill.

    ``outputs`` maps record id to a :class:`VideoClip`, or is a directory with
    one clip folder per record id.
    """
    edited = {r.id: _output_for(outputs, r.id) for r in manifest.records}
    rows, frames = [], set()
    for rec in manifest.records:
        sample = manifest.load_sample(rec)
        clip = edited[rec.id]
        if clip.shape != sample.source.shape:
            raise ShapeError(f"output for {rec.id} has shape {clip.shape}, source {sample.source.shape}")
        frames.add(clip.n)
        vals = score_sample(rec.skill, rec.instruction, sample.source, clip, sample.gt_mask, clients, judge_calls)
        rows.append(MetricRow(rec.id, rec.skill.value, vals))
    meta = {"seeds": list(seeds), "frames": sorted(frames), "samples": len(rows), "judge_calls": judge_calls}
    return MetricReport(rows, meta)
