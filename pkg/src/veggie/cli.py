"""``veggie`` command line: synth-toy, train, edit, eval, synth, analyze.

Every subcommand resolves its settings as built-in defaults, then the
``--config`` file (JSON or TOML; flat or keyed by subcommand), then explicit
flags.  The resolved settings are validated against a JSON schema and saved
as ``resolved_config.json`` under ``--out``.  Exit status: 0 on success, 1 on
a domain error, 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError, VeggieError
from .media import Skill

log = logging.getLogger("veggie")

SKILLS = [s.value for s in Skill]


# -- logging -----------------------------------------------------------------


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        entry = {
            "time": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        fields = getattr(record, "fields", None)
        if fields:
            entry.update(fields)
        return json.dumps(entry, sort_keys=True, default=str)


def setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def cache_dir() -> Path:
    return Path(os.environ.get("VEGGIE_CACHE") or Path.home() / ".cache" / "veggie")


def resolve_checkpoint(ref: str) -> Path:
    """A checkpoint path, or a bare name looked up under ``$VEGGIE_CACHE/models``."""
    p = Path(ref)
    if p.exists():
        return p
    cached = cache_dir() / "models" / ref
    return cached if cached.exists() else p


# -- config ------------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR = {"type": "string"}
_COMMON = {"seed": {"type": "integer", "minimum": 0}, "out": _STR, "log_level": {"enum": ["debug", "info", "warning", "error"]}}

SCHEMAS = {
    "synth-toy": {
        "count": {"type": "integer", "minimum": 1},
        "skills": {"type": "array", "items": {"enum": SKILLS}, "minItems": 1},
        "height": {"type": "integer", "minimum": 8},
        "width": {"type": "integer", "minimum": 8},
        "frames": {"type": "integer", "minimum": 2},
        "visual_mode": {"enum": ["any", "recolor", "texture"]},
        "balanced": {"type": "boolean"},
    },
    "train": {
        "stage": {"enum": [1, 2]},
        "data": _STR,
        "init_checkpoint": {"type": ["string", "null"]},
        "preset": {"enum": ["default", "desk"]},
        "steps": {"type": "integer", "minimum": 1},
        "lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "frames_per_sample": {"type": ["integer", "null"], "minimum": 1},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "trainable": {"type": ["array", "null"], "items": _STR},
        "cond_dropout": {
            "type": "object",
            "properties": {"p_text": _NUM, "p_video": _NUM, "p_both": _NUM},
            "additionalProperties": False,
        },
        "lora": {
            "type": "object",
            "properties": {"rank": _INT, "alpha": _NUM, "dropout": _NUM},
            "additionalProperties": False,
        },
    },
    "edit": {
        "checkpoint": _STR,
        "src": {"type": ["string", "null"]},
        "bench": {"type": ["string", "null"]},
        "instruction": {"type": ["string", "null"]},
        "ref": {"type": "array", "items": _STR},
        "skill": {"enum": SKILLS + [None]},
        "gt": {"type": ["number", "null"]},
        "gv": {"type": ["number", "null"]},
        "steps": {"type": "integer", "minimum": 1},
        "sampler": {"enum": ["ddim", "ddpm"]},
        "eta": {"type": "number", "minimum": 0, "maximum": 1},
    },
    "eval": {
        "bench": _STR,
        "outputs": _STR,
        "clients": {"enum": ["mock", "remote"]},
        "endpoint": {"type": ["string", "null"]},
        "report": {"type": ["string", "null"]},
        "judge_calls": {"type": "integer", "minimum": 1},
    },
    "synth": {
        "pairs": _STR,
        "backends": {"enum": ["mock", "remote"]},
        "endpoint": {"type": ["string", "null"]},
        "frames": {"type": "integer", "minimum": 2},
        "thresholds": {
            "type": "object",
            "properties": {k: _NUM for k in ("aesthetic_min", "imaging_min", "smoothness_min", "subject_min",
                                              "background_min")},
            "additionalProperties": False,
        },
    },
    "analyze": {
        "checkpoint": _STR,
        "manifest": _STR,
    },
}

DEFAULTS = {
    "synth-toy": {"count": 64, "skills": SKILLS, "height": 32, "width": 32, "frames": 8, "visual_mode": "any",
                  "balanced": False},
    "train": {"stage": 1, "init_checkpoint": None, "preset": "desk", "steps": 2000, "lr": None, "batch": 8,
              "frames_per_sample": None, "checkpoint_every": 0, "trainable": None,
              "cond_dropout": {"p_text": 0.05, "p_video": 0.05, "p_both": 0.05},
              "lora": {"rank": 64, "alpha": 16.0, "dropout": 0.05}},
    "edit": {"src": None, "bench": None, "instruction": None, "ref": [], "skill": None, "gt": None, "gv": None,
             "steps": 50, "sampler": "ddim", "eta": 0.0},
    "eval": {"clients": "mock", "endpoint": None, "report": None, "judge_calls": 5},
    "synth": {"backends": "mock", "endpoint": None, "frames": 8, "thresholds": {}},
    "analyze": {},
}
REQUIRED = {
    "synth-toy": ["out"],
    "train": ["data", "out"],
    "edit": ["checkpoint", "out"],
    "eval": ["bench", "outputs", "out"],
    "synth": ["pairs", "out"],
    "analyze": ["checkpoint", "manifest", "out"],
}


def load_config_file(path: str, command: str) -> dict:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib

            data = tomllib.loads(raw.decode())
        else:
            data = json.loads(raw)
    except Exception as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold an object")
    section = data.get(command, {})
    flat = {k: v for k, v in data.items() if k not in SCHEMAS}
    return {**flat, **section}


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {"seed": 0, "log_level": "info", **json.loads(json.dumps(DEFAULTS[command]))}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config, command))
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "func") and v is not None}
    cfg.update(given)
    schema = {
        "type": "object",
        "properties": {**_COMMON, **SCHEMAS[command]},
        "required": REQUIRED[command],
        "additionalProperties": False,
    }
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "config"
        raise ConfigError(f"invalid {command} config at {where}: {exc.message}") from exc
    return cfg


def write_snapshot(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    snap = out / "resolved_config.json"
    snap.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")
    return snap


def _seed_all(seed: int) -> None:
    import torch

    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------


def cmd_synth_toy(cfg: dict) -> None:
    from .toydata import SceneConfig, write_toy_dataset

    # shape sizes and speeds are tuned for 32x32; scale them for other canvases
    side = min(cfg["height"], cfg["width"])
    lo = max(2, round(side * 6 / 32))
    scene = SceneConfig(
        H=cfg["height"], W=cfg["width"], n=cfg["frames"], visual_mode=cfg["visual_mode"],
        size_range=(lo, max(lo + 1, round(side * 11 / 32))), max_speed=max(1, round(side * 3 / 32)),
        max_shapes=3 if side >= 16 else 2,
    )
    m = write_toy_dataset(cfg["out"], cfg["count"], cfg["skills"], cfg["seed"], scene, balanced=cfg["balanced"])
    event("synth-toy done", samples=len(m.records), manifest=str(Path(cfg["out"]) / "manifest.json"))


def cmd_train(cfg: dict) -> None:
    from .media import load_manifest
    from .model import PRESETS
    from .trainer import StagePlan, run_stage

    _seed_all(cfg["seed"])
    cond_cfg, unet_cfg = PRESETS[cfg["preset"]]
    init = cfg["init_checkpoint"]
    if cfg["stage"] == 2 and init is None:
        guess = Path(cfg["out"]) / "stage1.ckpt"
        init = str(guess) if guess.exists() else None
    plan = StagePlan(
        stage=cfg["stage"], steps=cfg["steps"], lr=cfg["lr"], batch=cfg["batch"],
        frames_per_sample=cfg["frames_per_sample"], cond_dropout=cfg["cond_dropout"],
        trainable=cfg["trainable"], checkpoint_every=cfg["checkpoint_every"], out_dir=cfg["out"],
        init_checkpoint=str(resolve_checkpoint(init)) if init else None, seed=cfg["seed"], lora=cfg["lora"],
        conditioner=cond_cfg, unet=unet_cfg,
    )
    if plan.stage == 2 and plan.init_checkpoint is None:
        from .errors import MissingPrerequisite

        raise MissingPrerequisite("stage 2 requires a stage-1 checkpoint (--init)")
    data = load_manifest(cfg["data"])
    report = run_stage(plan, data, progress_every=max(1, plan.steps // 20))
    _write_json(Path(cfg["out"]) / f"stage{plan.stage}_report.json", report.to_json())
    event("train done", stage=plan.stage, steps=plan.steps, final_ema_loss=report.final_ema_loss,
          wall_time=round(report.wall_time, 2))


def _guidance(cfg: dict, skill):
    from .sampler import GuidanceConfig, scales_for

    g_T, g_V = scales_for(skill)
    if cfg["gt"] is not None:
        g_T = cfg["gt"]
    if cfg["gv"] is not None:
        g_V = cfg["gv"]
    return GuidanceConfig(g_T=g_T, g_V=g_V, steps=cfg["steps"], sampler=cfg["sampler"], eta=cfg["eta"],
                          seed=cfg["seed"])


def _load_refs(paths) -> list[np.ndarray]:
    from PIL import Image

    refs = []
    for p in paths:
        try:
            with Image.open(p) as im:
                refs.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
        except OSError as exc:
            from .errors import IoError

            raise IoError(f"cannot read reference image {p}: {exc}") from exc
    return refs


def cmd_edit(cfg: dict) -> None:
    from .media import load_clip, load_manifest, save_clip
    from .sampler import Editor

    if (cfg["src"] is None) == (cfg["bench"] is None):
        raise ConfigError("edit needs exactly one of --src or --bench")
    editor = Editor.from_checkpoint(resolve_checkpoint(cfg["checkpoint"]))
    out = Path(cfg["out"])
    if cfg["src"] is not None:
        if not cfg["instruction"]:
            raise ConfigError("--instruction is required with --src")
        gcfg = _guidance(cfg, cfg["skill"])
        event("resolved guidance", gt=gcfg.g_T, gv=gcfg.g_V, seed=gcfg.seed, steps=gcfg.steps)
        clip, run_log = editor.edit(load_clip(cfg["src"]), cfg["instruction"], _load_refs(cfg["ref"]),
                                    cfg["skill"], gcfg)
        save_clip(clip, out / "edited")
        _write_json(out / "run_log.json", run_log)
        return
    manifest = load_manifest(cfg["bench"])
    logs = {}
    for rec in manifest.records:
        sample = manifest.load_sample(rec)
        gcfg = _guidance(cfg, rec.skill)
        clip, run_log = editor.edit(sample.source, rec.instruction, (), rec.skill, gcfg)
        save_clip(clip, out / "outputs" / rec.id)
        logs[rec.id] = run_log
        event("edited", id=rec.id, skill=rec.skill.value, gt=gcfg.g_T, gv=gcfg.g_V)
    _write_json(out / "run_log.json", logs)


def cmd_eval(cfg: dict) -> None:
    from .media import load_manifest
    from .metrics import Clients, run_bench

    if cfg["clients"] == "remote":
        if not cfg["endpoint"]:
            raise ConfigError("remote clients need an endpoint")
        clients = Clients.remote(cfg["endpoint"])
    else:
        clients = Clients.mock()
    report = run_bench(load_manifest(cfg["bench"]), cfg["outputs"], clients, cfg["judge_calls"], seeds=[cfg["seed"]])
    path = Path(cfg["report"] or Path(cfg["out"]) / "report.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    (Path(cfg["out"]) / "report.txt").write_text(report.table())
    sys.stdout.write(report.table())
    event("eval done", report=str(path), samples=len(report.rows))


def cmd_synth(cfg: dict) -> None:
    from .synthesis import Backends, FilterThresholds, load_pair_requests, synthesize_dataset

    if cfg["backends"] == "remote":
        if not cfg["endpoint"]:
            raise ConfigError("remote backends need an endpoint")
        backends = Backends.remote(cfg["endpoint"])
    else:
        backends = Backends.mock(cfg["frames"])
    requests = load_pair_requests(cfg["pairs"])
    result = synthesize_dataset(requests, backends, cfg["out"], cfg["seed"], FilterThresholds(**cfg["thresholds"]))
    _write_json(Path(cfg["out"]) / "synthesis_summary.json", result.summary())
    event("synth done", accepted=len(result.accepted), rejected=len(result.rejected), failed=len(result.failed))


def cmd_analyze(cfg: dict) -> None:
    from .analysis import analyze_queries

    proj = analyze_queries(resolve_checkpoint(cfg["checkpoint"]), cfg["manifest"], Path(cfg["out"]) / "queries.csv")
    event("analyze done", rows=len(proj.rows))


COMMANDS = {
    "synth-toy": cmd_synth_toy,
    "train": cmd_train,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "analyze": cmd_analyze,
}


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--log-level", dest="log_level", choices=["debug", "info", "warning", "error"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="veggie", description="Instructional video editing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-toy", help="write a moving-shapes dataset")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--skills", nargs="+", choices=SKILLS)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--visual-mode", dest="visual_mode", choices=["any", "recolor", "texture"])
    p.add_argument("--balanced", action="store_true", default=None, help="round-robin skills")

    p = sub.add_parser("train", help="run one curriculum stage")
    _common(p)
    p.add_argument("--stage", type=int, choices=[1, 2])
    p.add_argument("--data", help="training manifest")
    p.add_argument("--init", dest="init_checkpoint", help="stage-1 checkpoint for stage 2")
    p.add_argument("--preset", choices=["default", "desk"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--frames", dest="frames_per_sample", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    p = sub.add_parser("edit", help="edit a clip or every record of a bench")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint path or cached name")
    p.add_argument("--src", help="source clip directory")
    p.add_argument("--bench", help="manifest to edit record by record")
    p.add_argument("--instruction")
    p.add_argument("--ref", nargs="+", help="reference images")
    p.add_argument("--skill", choices=SKILLS)
    p.add_argument("--gt", type=float, help="task guidance scale")
    p.add_argument("--gv", type=float, help="video guidance scale")
    p.add_argument("--steps", type=int)
    p.add_argument("--sampler", choices=["ddim", "ddpm"])
    p.add_argument("--eta", type=float)

    p = sub.add_parser("eval", help="score edited outputs on a bench")
    _common(p)
    p.add_argument("--bench")
    p.add_argument("--outputs", help="directory with one clip folder per record id")
    p.add_argument("--clients", choices=["mock", "remote"])
    p.add_argument("--endpoint")
    p.add_argument("--report", help="report JSON path (default OUT/report.json)")
    p.add_argument("--judge-calls", dest="judge_calls", type=int)

    p = sub.add_parser("synth", help="synthesize editing pairs from image pairs")
    _common(p)
    p.add_argument("--pairs", help="pairs JSON")
    p.add_argument("--backends", choices=["mock", "remote"])
    p.add_argument("--endpoint")
    p.add_argument("--frames", type=int)

    p = sub.add_parser("analyze", help="project task queries to 2-D")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.command, args)
    except ConfigError as exc:
        print(f"veggie {args.command}: error: {exc}", file=sys.stderr)
        return 2
    setup_logging(cfg["log_level"])
    try:
        write_snapshot(cfg, args.command)
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg)
        log.debug("elapsed %.2fs", time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"veggie {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except VeggieError as exc:
        print(f"veggie {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
