import csv
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from veggie.cli import main
from veggie.media import load_clip

TINY = ["--height", "8", "--width", "8", "--frames", "2"]


def _tree_digest(root, skip=("resolved_config.json",)):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def toy(tmp_path):
    out = tmp_path / "toy"
    assert main(["synth-toy", "--out", str(out), "--count", "6", "--skills", "grounding", "removal",
                 "--balanced", "--seed", "1", *TINY]) == 0
    return out


@pytest.fixture
def stage1(tmp_path, toy):
    out = tmp_path / "train"
    assert main(["train", "--data", str(toy / "manifest.json"), "--out", str(out), "--steps", "2",
                 "--batch", "2", "--seed", "0"]) == 0
    return out


def test_exit_codes(tmp_path, toy, capsys):
    assert main(["synth-toy", "--bogus"]) == 2
    assert main(["train", "--out", str(tmp_path / "t")]) == 2  # no --data
    assert main(["train", "--stage", "2", "--data", str(toy / "manifest.json"), "--out", str(tmp_path / "t2")]) == 1
    assert "MissingPrerequisite" in capsys.readouterr().err
    assert main(["eval", "--bench", str(toy / "manifest.json"), "--outputs", str(tmp_path / "none"),
                 "--out", str(tmp_path / "e")]) == 1


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('count = 3\nseed = 5\n[synth-toy]\ncount = 4\nheight = 8\nwidth = 8\nframes = 2\n')
    out = tmp_path / "o"
    assert main(["synth-toy", "--config", str(cfg), "--out", str(out), "--count", "2"]) == 0
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["count"] == 2 and snap["seed"] == 5 and snap["height"] == 8
    assert len(json.loads((out / "manifest.json").read_text())["records"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"count": "many"}))
    assert main(["synth-toy", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2
    bad.write_text(json.dumps({"colour": "red"}))
    assert main(["synth-toy", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2


def test_train_stages(tmp_path, toy, stage1):
    report = json.loads((stage1 / "stage1_report.json").read_text())
    assert report["steps"] == 2 and report["frozen_digest_before"] == report["frozen_digest_after"]
    assert "wall_time" not in report
    assert main(["train", "--stage", "2", "--data", str(toy / "manifest.json"), "--out", str(stage1),
                 "--steps", "1", "--batch", "1", "--frames", "2"]) == 0
    assert (stage1 / "stage2.ckpt").exists()


def test_edit_logs_grounding_scales(tmp_path, toy, stage1, capfd):
    src = toy / "samples" / "toy000000" / "source"
    out = tmp_path / "ed"
    assert main(["edit", "--checkpoint", str(stage1 / "stage1.ckpt"), "--src", str(src), "--instruction",
                 "fill the red square with green", "--skill", "grounding", "--steps", "2", "--out", str(out)]) == 0
    lines = [json.loads(x) for x in capfd.readouterr().err.splitlines() if x.startswith("{")]
    ev = next(x for x in lines if x["msg"] == "resolved guidance")
    assert (ev["gt"], ev["gv"]) == (14.5, 1.5)
    log = json.loads((out / "run_log.json").read_text())
    assert (log["guidance"]["g_T"], log["guidance"]["g_V"]) == (14.5, 1.5)
    assert load_clip(out / "edited").shape == load_clip(src).shape


def test_checkpoint_by_name(tmp_path, toy, stage1, monkeypatch):
    cache = tmp_path / "cache"
    (cache / "models").mkdir(parents=True)
    (cache / "models" / "tiny").write_bytes((stage1 / "stage1.ckpt").read_bytes())
    monkeypatch.setenv("VEGGIE_CACHE", str(cache))
    assert main(["edit", "--checkpoint", "tiny", "--bench", str(toy / "manifest.json"), "--steps", "1",
                 "--out", str(tmp_path / "b")]) == 0
    assert len(list((tmp_path / "b" / "outputs").iterdir())) == 6


def test_analyze_rows(tmp_path, stage1):
    data = tmp_path / "an"
    assert main(["synth-toy", "--out", str(data), "--count", "10", "--skills", "grounding", "removal",
                 "--balanced", *TINY]) == 0
    out = tmp_path / "analysis"
    assert main(["analyze", "--checkpoint", str(stage1 / "stage1.ckpt"), "--manifest", str(data / "manifest.json"),
                 "--out", str(out)]) == 0
    rows = list(csv.reader((out / "queries.csv").open()))
    assert rows[0] == ["skill", "x", "y"] and len(rows) == 11
    assert (out / "queries.png").stat().st_size > 0
    one = tmp_path / "one"
    main(["synth-toy", "--out", str(one), "--count", "3", "--skills", "removal", *TINY])
    assert main(["analyze", "--checkpoint", str(stage1 / "stage1.ckpt"), "--manifest", str(one / "manifest.json"),
                 "--out", str(tmp_path / "a2")]) == 1


def _pairs(root):
    root.mkdir()
    rng = np.random.default_rng(0)
    img = np.zeros((16, 16, 3))
    img[4:10, 4:10] = (1.0, 0.0, 0.0)
    img += rng.random((16, 16, 3)) * 0.0
    edited = img.copy()
    edited[4:10, 4:10] = (1.0, 1.0, 0.0)
    Image.fromarray((img * 255).astype(np.uint8)).save(root / "a.png")
    Image.fromarray((edited * 255).astype(np.uint8)).save(root / "b.png")
    (root / "pairs.json").write_text(json.dumps({"pairs": [
        {"id": "p0", "image": "a.png", "edited": "b.png", "instruction": "make the red square yellow"}]}))
    return root / "pairs.json"


def _run_all(base, pairs):
    """Every subcommand once, each into its own directory under ``base``."""
    d = {k: base / k for k in ("toy", "train", "edit", "eval", "synth", "analyze")}
    assert main(["synth-toy", "--out", str(d["toy"]), "--count", "4", "--skills", "grounding", "addition",
                 "--balanced", "--seed", "3", *TINY]) == 0
    manifest = str(d["toy"] / "manifest.json")
    assert main(["train", "--data", manifest, "--out", str(d["train"]), "--steps", "2", "--batch", "2"]) == 0
    ckpt = str(d["train"] / "stage1.ckpt")
    assert main(["edit", "--checkpoint", ckpt, "--bench", manifest, "--steps", "2", "--seed", "4",
                 "--out", str(d["edit"])]) == 0
    assert main(["eval", "--bench", manifest, "--outputs", str(d["edit"] / "outputs"), "--judge-calls", "2",
                 "--out", str(d["eval"])]) == 0
    assert main(["synth", "--pairs", str(pairs), "--out", str(d["synth"])]) == 0
    assert main(["analyze", "--checkpoint", ckpt, "--manifest", manifest, "--out", str(d["analyze"])]) == 0
    return d


def test_every_subcommand_reproducible(tmp_path):
    pairs = _pairs(tmp_path / "pairs")
    a = _run_all(tmp_path / "a", pairs)
    b = _run_all(tmp_path / "b", pairs)
    for key in a:
        assert _tree_digest(a[key]) == _tree_digest(b[key]), key
    summary = json.loads((a["synth"] / "synthesis_summary.json").read_text())
    assert set(summary) == {"accepted", "rejected", "failed"}


@pytest.mark.slow
def test_end_to_end_smoke(tmp_path):
    import time

    t0 = time.perf_counter()
    toy = tmp_path / "toy"
    assert main(["synth-toy", "--out", str(toy), "--count", "32", "--skills", "grounding", "visual_feature",
                 "--balanced", "--seed", "0"]) == 0
    manifest = str(toy / "manifest.json")
    run = tmp_path / "run"
    assert main(["train", "--data", manifest, "--out", str(run), "--steps", "200"]) == 0
    assert main(["train", "--stage", "2", "--data", manifest, "--out", str(run), "--steps", "100", "--batch", "1"]) == 0
    bench = tmp_path / "bench"
    assert main(["synth-toy", "--out", str(bench), "--count", "4", "--skills", "grounding", "visual_feature",
                 "--balanced", "--seed", "9"]) == 0
    edits = tmp_path / "edits"
    assert main(["edit", "--checkpoint", str(run / "stage2.ckpt"), "--bench", str(bench / "manifest.json"),
                 "--steps", "10", "--out", str(edits)]) == 0
    assert main(["eval", "--bench", str(bench / "manifest.json"), "--outputs", str(edits / "outputs"),
                 "--out", str(tmp_path / "eval")]) == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert len(report["samples"]) == 4 and set(report["per_skill"]) == {"grounding", "visual_feature"}
    assert time.perf_counter() - t0 < 45 * 60
