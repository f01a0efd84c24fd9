"""Procedural moving-shapes data covering all eight editing skills.

Every sample is rendered from an explicit scene description, so targets and
ground-truth masks are exact.  Grounding and reasoning samples are cast as
colour filling: the referred shape's visible pixels are painted with the fill
colour, and :func:`fill_to_mask` recovers a mask from a generated video.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GenerationError, ShapeError
from .media import (
    DatasetManifest,
    InstructionSample,
    ManifestRecord,
    MaskVideo,
    Skill,
    VideoClip,
    save_clip,
    save_mask,
)

KINDS = ("square", "circle", "triangle")

# no greens: the fill colour must stay recoverable
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}
BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    "black": (0.0, 0.0, 0.0),
    "gray": (0.3, 0.3, 0.3),
    "navy": (0.0, 0.0, 0.4),
    "maroon": (0.4, 0.0, 0.0),
    "brown": (0.45, 0.3, 0.15),
    "slate": (0.25, 0.3, 0.4),
}
ANCHORS = {
    "top left": (0.25, 0.25),
    "top right": (0.75, 0.25),
    "bottom left": (0.25, 0.75),
    "bottom right": (0.75, 0.75),
    "center": (0.5, 0.5),
}
SEPIA = np.array([[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]])


@dataclass(frozen=True)
class FillSpec:
    fill_color: tuple[float, float, float] = (0.0, 1.0, 0.0)
    tolerance: float = 60 / 255

    def distance(self, color) -> float:
        """Chebyshev (max-channel) distance to the fill colour."""
        return float(np.max(np.abs(np.asarray(color, dtype=np.float64) - np.asarray(self.fill_color))))


DEFAULT_FILL = FillSpec()


@dataclass
class Shape:
    kind: str
    color: str
    size: float
    p0: tuple[float, float]  # centre (x, y) at frame 0
    v: tuple[float, float] = (0.0, 0.0)  # px / frame
    removable: bool = True
    texture: str = "solid"  # or "striped"

    @property
    def rgb(self) -> np.ndarray:
        return np.asarray(PALETTE[self.color])

    @property
    def speed(self) -> float:
        return math.hypot(*self.v)

    def center(self, t: float) -> tuple[float, float]:
        return self.p0[0] + self.v[0] * t, self.p0[1] + self.v[1] * t

    def footprint(self, t: float, H: int, W: int) -> np.ndarray:
        cx, cy = self.center(t)
        ys, xs = np.mgrid[0:H, 0:W] + 0.5
        r = self.size / 2
        if self.kind == "square":
            return (np.abs(xs - cx) < r) & (np.abs(ys - cy) < r)
        if self.kind == "circle":
            return (xs - cx) ** 2 + (ys - cy) ** 2 < r * r
        if self.kind == "triangle":
            top = cy - r
            frac = (ys - top) / self.size
            return (frac >= 0) & (frac < 1) & (np.abs(xs - cx) < frac * r)
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def describe(self) -> str:
        return f"{self.color} {self.kind}"


@dataclass
class ShapeScene:
    shapes: list[Shape]
    background: str = "black"
    gradient_to: str | None = None
    H: int = 32
    W: int = 32
    n: int = 8
    fps: int = 8

    def __post_init__(self):
        if not self.shapes:
            raise GenerationError("a scene needs at least one shape")
        for s in self.shapes:
            r = s.size / 2
            for t in (0, self.n - 1):
                cx, cy = s.center(t)
                if cx - r < 0 or cy - r < 0 or cx + r > self.W or cy + r > self.H:
                    raise GenerationError(f"{s.describe()} leaves the canvas")

    def background_image(self) -> np.ndarray:
        c0 = np.asarray(BACKGROUNDS[self.background])
        img = np.broadcast_to(c0, (self.H, self.W, 3)).copy()
        if self.gradient_to:
            c1 = np.asarray(BACKGROUNDS[self.gradient_to])
            w = (np.arange(self.H) / max(self.H - 1, 1))[:, None, None]
            img = (1 - w) * c0 + w * c1
            img = np.broadcast_to(img, (self.H, self.W, 3)).copy()
        return img

    def render(self) -> tuple[np.ndarray, list[np.ndarray]]:
        """Frames ``(n, H, W, 3)`` and the visible mask of every shape ``(n, H, W)``."""
        frames = np.empty((self.n, self.H, self.W, 3))
        visible = [np.zeros((self.n, self.H, self.W), dtype=bool) for _ in self.shapes]
        bg = self.background_image()
        for t in range(self.n):
            img = bg.copy()
            for i, s in enumerate(self.shapes):
                fp = s.footprint(t, self.H, self.W)
                if s.texture == "striped":
                    stripes = (np.arange(self.H) // 2 % 2 == 0)[:, None]
                    paint = np.where(stripes[..., None], s.rgb, np.asarray(PALETTE["white"]) * 0.5)
                    img[fp] = np.broadcast_to(paint, img.shape)[fp]
                else:
                    img[fp] = s.rgb
                for prev in visible[:i]:
                    prev[t] &= ~fp
                visible[i][t] = fp
            frames[t] = img
        return frames, visible

    def clip(self) -> VideoClip:
        return VideoClip(self.render()[0], self.fps)

    def replace(self, **kw) -> "ShapeScene":
        return dataclasses.replace(self, **kw)


@dataclass
class SceneConfig:
    H: int = 32
    W: int = 32
    n: int = 8
    fps: int = 8
    min_shapes: int = 1
    max_shapes: int = 3
    size_range: tuple[int, int] = (6, 11)
    max_speed: int = 3
    gradient_prob: float = 0.2
    fill: FillSpec = DEFAULT_FILL
    visual_mode: str = "any"  # recolor | texture | any
    style: str = "any"  # sepia | invert | any
    shapes: list[Shape] | None = None  # explicit scene overrides random shapes
    background: str | None = None
    max_tries: int = 200


# -- instruction templates (>= 8 paraphrases each) ---------------------------

TEMPLATES: dict[str, list[str]] = {
    "addition": [
        "add a {new} at the {where}",
        "put a {new} in the {where}",
        "insert a {new} at the {where}",
        "place a {new} at the {where} of the video",
        "draw a {new} in the {where}",
        "add a {new} to the {where} of the scene",
        "include a {new} at the {where}",
        "make a {new} appear at the {where}",
    ],
    "removal": [
        "remove the {ref}",
        "delete the {ref}",
        "erase the {ref} from the video",
        "get rid of the {ref}",
        "take out the {ref}",
        "make the {ref} disappear",
        "remove the {ref} from the scene",
        "clear away the {ref}",
    ],
    "object_change": [
        "turn the {ref} into a {kind2}",
        "change the {ref} to a {kind2}",
        "replace the {ref} with a {color} {kind2}",
        "make the {ref} a {kind2}",
        "transform the {ref} into a {kind2}",
        "swap the {ref} for a {color} {kind2}",
        "convert the {ref} into a {kind2}",
        "reshape the {ref} into a {kind2}",
    ],
    "env_change": [
        "change the background to {bg}",
        "make the background {bg}",
        "set the background color to {bg}",
        "turn the background {bg}",
        "replace the background with a {bg} one",
        "recolor the background {bg}",
        "paint the background {bg}",
        "use a {bg} background",
    ],
    "visual_feature_recolor": [
        "make the {ref} {color2}",
        "change the color of the {ref} to {color2}",
        "recolor the {ref} {color2}",
        "paint the {ref} {color2}",
        "turn the {ref} {color2}",
        "color the {ref} in {color2}",
        "give the {ref} a {color2} color",
        "the {ref} should be {color2}",
    ],
    "visual_feature_texture": [
        "make the {ref} striped",
        "add stripes to the {ref}",
        "give the {ref} a striped texture",
        "cover the {ref} with stripes",
        "turn the {ref} striped",
        "put a stripe pattern on the {ref}",
        "texture the {ref} with stripes",
        "apply stripes to the {ref}",
    ],
    "stylization_sepia": [
        "apply a sepia style",
        "make the video look like an old sepia photo",
        "give the video a sepia tone",
        "stylize the video in sepia",
        "turn the video sepia",
        "render the scene in vintage sepia",
        "add a sepia filter",
        "make it sepia toned",
    ],
    "stylization_invert": [
        "invert the colors",
        "make the video look like a photo negative",
        "apply a color inversion",
        "turn the video into its negative",
        "stylize the video as a negative image",
        "invert every color in the video",
        "give the video an inverted color style",
        "render the scene with inverted colors",
    ],
    "grounding": [
        "fill the {ref} with green",
        "color the {ref} green",
        "highlight the {ref} in green",
        "segment the {ref} by painting it green",
        "mark the {ref} with green",
        "paint the {ref} green",
        "locate the {ref} and fill it with green",
        "show where the {ref} is by filling it green",
    ],
    "reasoning_action": [
        "Fill it with green.",
        "Paint it green.",
        "Highlight it in green.",
        "Color it green.",
        "Mark it with green.",
        "Fill that shape green.",
        "Segment it in green.",
        "Show it by painting it green.",
    ],
}

REASONING_QUESTIONS = {
    "fastest": ["Which shape is moving the fastest?", "Which shape moves quickest?"],
    "largest": ["Which shape is the largest?", "Which shape is the biggest?"],
    "smallest": ["Which shape is the smallest?", "Which shape is the tiniest?"],
    "leftmost": ["Which shape starts furthest to the left?", "Which shape begins closest to the left edge?"],
    "left_of": ["Which shape starts to the left of the {ref}?", "Which shape begins left of the {ref}?"],
    "odd_kind": ["Which shape is the only one of its kind?", "Which kind of shape appears exactly once?"],
}


@dataclass
class GeneratedSample:
    sample: InstructionSample
    scene: ShapeScene
    referent: int | None = None
    meta: dict = field(default_factory=dict)


# -- fill <-> mask -----------------------------------------------------------


def mask_to_fill(clip: VideoClip, mask: MaskVideo, spec: FillSpec = DEFAULT_FILL) -> VideoClip:
    mask.check_pairs(clip)
    if clip.C != 3:
        raise ShapeError("colour filling needs RGB clips")
    frames = np.array(clip.frames)
    frames[mask.masks] = spec.fill_color
    return clip.with_frames(frames)


def fill_to_mask(generated: VideoClip, spec: FillSpec = DEFAULT_FILL) -> MaskVideo:
    diff = np.abs(generated.frames - np.asarray(spec.fill_color))
    return MaskVideo(np.all(diff <= spec.tolerance + 1e-12, axis=-1))


def stylize(frames: np.ndarray, style: str) -> np.ndarray:
    if style == "invert":
        return 1.0 - frames
    if style == "sepia":
        return np.clip(frames @ SEPIA.T, 0.0, 1.0)
    raise ValueError(f"unknown style {style!r}")


# -- scene sampling ----------------------------------------------------------


def _random_shape(rng: np.random.Generator, cfg: SceneConfig, color: str, kind: str | None = None,
                  speed: int | None = None, size: int | None = None) -> Shape:
    size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1)) if size is None else size
    kind = kind or str(rng.choice(KINDS))
    speed = int(rng.integers(0, cfg.max_speed + 1)) if speed is None else speed
    r = size / 2
    for _ in range(50):
        angle = rng.choice(8) * np.pi / 4
        v = (round(speed * math.cos(angle), 6), round(speed * math.sin(angle), 6))
        travel_x, travel_y = v[0] * (cfg.n - 1), v[1] * (cfg.n - 1)
        lo_x, hi_x = r - min(travel_x, 0), cfg.W - r - max(travel_x, 0)
        lo_y, hi_y = r - min(travel_y, 0), cfg.H - r - max(travel_y, 0)
        if lo_x <= hi_x and lo_y <= hi_y:
            p0 = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
            return Shape(kind, color, float(size), p0, v)
    return Shape(kind, color, float(size), (cfg.W / 2, cfg.H / 2), (0.0, 0.0))


def random_scene(rng: np.random.Generator, cfg: SceneConfig, n_shapes: int | None = None) -> ShapeScene:
    if cfg.shapes is not None:
        bg = cfg.background or "black"
        return ShapeScene([dataclasses.replace(s) for s in cfg.shapes], bg, None, cfg.H, cfg.W, cfg.n, cfg.fps)
    k = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1)) if n_shapes is None else n_shapes
    colors = rng.choice(list(PALETTE), size=k, replace=False)
    shapes = [_random_shape(rng, cfg, str(c)) for c in colors]
    bg = cfg.background or str(rng.choice(list(BACKGROUNDS)))
    grad = None
    if cfg.background is None and rng.random() < cfg.gradient_prob:
        grad = str(rng.choice([b for b in BACKGROUNDS if b != bg]))
    return ShapeScene(shapes, bg, grad, cfg.H, cfg.W, cfg.n, cfg.fps)


def _pick(rng, options: Sequence[str]) -> str:
    return str(options[int(rng.integers(len(options)))])


def _unique_argbest(values: Sequence[float], best=max, margin: float = 1e-9) -> int | None:
    target = best(values)
    winners = [i for i, v in enumerate(values) if abs(v - target) <= margin]
    if len(winners) != 1:
        return None
    others = [v for i, v in enumerate(values) if i != winners[0]]
    if others and min(abs(v - target) for v in others) < 1.0:
        return None
    return winners[0]


def _reasoning_referent(rng, scene: ShapeScene, visible) -> tuple[int, str, dict] | None:
    shapes = scene.shapes
    if len(shapes) < 2:
        return None
    kinds = list(REASONING_QUESTIONS)
    rng.shuffle(kinds)
    for kind in kinds:
        fmt = {}
        if kind == "fastest":
            idx = _unique_argbest([s.speed for s in shapes])
        elif kind == "largest":
            idx = _unique_argbest([float(v[0].sum()) for v in visible])
        elif kind == "smallest":
            idx = _unique_argbest([float(v[0].sum()) for v in visible], best=min)
        elif kind == "leftmost":
            idx = _unique_argbest([s.p0[0] for s in shapes], best=min)
        elif kind == "left_of":
            idx = None
            for j, ref in enumerate(shapes):
                left = [i for i, s in enumerate(shapes) if i != j and s.p0[0] < ref.p0[0] - 2]
                close = [i for i, s in enumerate(shapes) if i != j and abs(s.p0[0] - ref.p0[0]) <= 2]
                if len(left) == 1 and not close:
                    idx, fmt = left[0], {"ref": ref.describe()}
                    break
        else:  # odd_kind
            counts = {k: sum(s.kind == k for s in shapes) for k in KINDS}
            singles = [i for i, s in enumerate(shapes) if counts[s.kind] == 1]
            idx = singles[0] if len(singles) == 1 and len(shapes) >= 3 else None
        if idx is not None and visible[idx].any():
            q = _pick(rng, REASONING_QUESTIONS[kind]).format(**fmt)
            return idx, kind, {"question": q}
    return None


def generate(rng: np.random.Generator, skill, scene_config: SceneConfig | None = None) -> GeneratedSample:
    """Render one (source, instruction, target[, mask]) sample for ``skill``."""
    skill = Skill.parse(skill)
    cfg = scene_config or SceneConfig()
    explicit = cfg.shapes is not None
    for _ in range(1 if explicit else cfg.max_tries):
        n_shapes = None
        if skill == Skill.REASONING and not explicit:
            n_shapes = int(rng.integers(max(2, cfg.min_shapes), max(3, cfg.max_shapes) + 1))
        scene = random_scene(rng, cfg, n_shapes)
        out = _build(rng, skill, scene, cfg)
        if out is not None:
            return out
    raise GenerationError(f"could not construct a valid {skill.value} sample")


def generate_sample(rng: np.random.Generator, skill, scene_config: SceneConfig | None = None) -> InstructionSample:
    return generate(rng, skill, scene_config).sample


def _build(rng, skill: Skill, scene: ShapeScene, cfg: SceneConfig) -> GeneratedSample | None:
    frames, visible = scene.render()
    source = VideoClip(frames, scene.fps)
    live = [i for i, v in enumerate(visible) if v.any()]
    if not live:
        return None

    def refer(i):
        return scene.shapes[i].describe()

    def done(instruction, target_frames, referent=None, mask=None, **meta):
        target = VideoClip(target_frames, scene.fps)
        sample = InstructionSample(source, instruction, skill, target, mask)
        return GeneratedSample(sample, scene, referent, meta)

    if skill == Skill.ADDITION:
        used = {s.color for s in scene.shapes}
        color = _pick(rng, [c for c in PALETTE if c not in used])
        kind = _pick(rng, KINDS)
        where = _pick(rng, list(ANCHORS))
        ax, ay = ANCHORS[where]
        size = float(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        new = Shape(kind, color, size, (ax * scene.W, ay * scene.H))
        tgt = scene.replace(shapes=scene.shapes + [new]).render()[0]
        text = _pick(rng, TEMPLATES["addition"]).format(new=new.describe(), where=where)
        return done(text, tgt, None, added=new.describe(), where=where)

    if skill == Skill.REMOVAL:
        cands = [i for i in live if scene.shapes[i].removable]
        if not cands:
            raise GenerationError("no removable shape in the scene")
        i = int(rng.choice(cands))
        rest = [s for j, s in enumerate(scene.shapes) if j != i]
        if rest:
            tgt = scene.replace(shapes=rest).render()[0]
        else:
            tgt = np.broadcast_to(scene.background_image(), frames.shape).copy()
        return done(_pick(rng, TEMPLATES["removal"]).format(ref=refer(i)), tgt, i)

    if skill == Skill.OBJECT_CHANGE:
        i = int(rng.choice(live))
        old = scene.shapes[i]
        kind2 = _pick(rng, [k for k in KINDS if k != old.kind])
        shapes = list(scene.shapes)
        shapes[i] = dataclasses.replace(old, kind=kind2)
        tgt = scene.replace(shapes=shapes).render()[0]
        text = _pick(rng, TEMPLATES["object_change"]).format(ref=refer(i), kind2=kind2, color=old.color)
        return done(text, tgt, i)

    if skill == Skill.ENV_CHANGE:
        bg = _pick(rng, [b for b in BACKGROUNDS if b != scene.background])
        tgt = scene.replace(background=bg, gradient_to=None).render()[0]
        return done(_pick(rng, TEMPLATES["env_change"]).format(bg=bg), tgt, None)

    if skill == Skill.VISUAL_FEATURE:
        i = int(rng.choice(live))
        old = scene.shapes[i]
        mode = cfg.visual_mode if cfg.visual_mode != "any" else _pick(rng, ["recolor", "texture"])
        shapes = list(scene.shapes)
        if mode == "recolor":
            used = {s.color for s in scene.shapes}
            color2 = _pick(rng, [c for c in PALETTE if c not in used])
            shapes[i] = dataclasses.replace(old, color=color2)
            text = _pick(rng, TEMPLATES["visual_feature_recolor"]).format(ref=refer(i), color2=color2)
        else:
            shapes[i] = dataclasses.replace(old, texture="striped")
            text = _pick(rng, TEMPLATES["visual_feature_texture"]).format(ref=refer(i))
        tgt = scene.replace(shapes=shapes).render()[0]
        return done(text, tgt, i, mode=mode)

    if skill == Skill.STYLIZATION:
        style = cfg.style if cfg.style != "any" else _pick(rng, ["sepia", "invert"])
        text = _pick(rng, TEMPLATES[f"stylization_{style}"])
        return done(text, stylize(frames, style), None, style=style)

    if skill == Skill.GROUNDING:
        i = int(rng.choice(live))
        mask = MaskVideo(visible[i])
        tgt = mask_to_fill(source, mask, cfg.fill).frames
        return done(_pick(rng, TEMPLATES["grounding"]).format(ref=refer(i)), tgt, i, mask)

    if skill == Skill.REASONING:
        found = _reasoning_referent(rng, scene, visible)
        if found is None:
            if cfg.shapes is not None:
                raise GenerationError("explicit scene admits no unambiguous reasoning question")
            return None
        i, kind, meta = found
        mask = MaskVideo(visible[i])
        tgt = mask_to_fill(source, mask, cfg.fill).frames
        text = f"{meta['question']} {_pick(rng, TEMPLATES['reasoning_action'])}"
        return done(text, tgt, i, mask, question_kind=kind)

    raise GenerationError(f"unsupported skill {skill}")


# -- dataset writer ------------------------------------------------------------


def draw_skills(rng: np.random.Generator, skills: Sequence, count: int, balanced: bool = False) -> list[Skill]:
    """Uniform random skills, or a round-robin over ``skills`` when ``balanced``."""
    skills = [Skill.parse(s) for s in skills]
    if balanced:
        return [skills[i % len(skills)] for i in range(count)]
    return [skills[i] for i in rng.integers(0, len(skills), size=count)]


def write_toy_dataset(out_dir, count: int, skills: Sequence = tuple(Skill), seed: int = 0,
                      scene_config: SceneConfig | None = None, prefix: str = "toy",
                      balanced: bool = False) -> DatasetManifest:
    """Generate ``count`` samples under ``out_dir`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for k, skill in enumerate(draw_skills(rng, skills, count, balanced)):
        gen = generate(rng, skill, scene_config)
        sid = f"{prefix}{k:06d}"
        base = Path("samples") / sid
        save_clip(gen.sample.source, out_dir / base / "source")
        save_clip(gen.sample.target, out_dir / base / "target")
        mask_dir = None
        if gen.sample.gt_mask is not None:
            mask_dir = str(base / "mask")
            save_mask(gen.sample.gt_mask, out_dir / mask_dir)
        records.append(ManifestRecord(sid, skill, gen.sample.instruction, str(base / "source"),
                                      str(base / "target"), mask_dir, f"moving-shapes seed={seed}"))
    manifest = DatasetManifest(records, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def generate_bank(count: int, skills: Sequence = tuple(Skill), seed: int = 0,
                  scene_config: SceneConfig | None = None, balanced: bool = False) -> list[GeneratedSample]:
    """In-memory variant of :func:`write_toy_dataset`."""
    rng = np.random.default_rng(seed)
    return [generate(rng, s, scene_config) for s in draw_skills(rng, skills, count, balanced)]
