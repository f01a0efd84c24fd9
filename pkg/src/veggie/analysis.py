"""Task-query projection export: CSV of 2-D PCA coordinates plus a scatter plot."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .conditioner import QueryProjection, export_query_projection
from .errors import InsufficientData
from .media import load_manifest
from .model import load_checkpoint


def skill_centroids(proj: QueryProjection) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    for skill, x, y in proj.rows:
        out.setdefault(skill, []).append((x, y))
    return {k: np.mean(v, axis=0) for k, v in out.items()}


def centroid_separation(proj: QueryProjection) -> float:
    """Smallest distance between two skill centroids."""
    cents = list(skill_centroids(proj).values())
    return float(min(np.linalg.norm(a - b) for i, a in enumerate(cents) for b in cents[i + 1:]))


def scatter_plot(proj: QueryProjection, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed metadata keeps the PNG byte-stable
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    for i, (skill, (cx, cy)) in enumerate(sorted(skill_centroids(proj).items())):
        pts = np.array([(x, y) for s, x, y in proj.rows if s == skill])
        ax.scatter(pts[:, 0], pts[:, 1], s=14, color=plt.cm.tab10(i % 10), label=skill)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def analyze_queries(checkpoint, manifest, out_csv) -> QueryProjection:
    m = load_manifest(manifest)
    if len({r.skill for r in m.records}) < 2:
        raise InsufficientData("query analysis needs a manifest with at least two skills")
    model = load_checkpoint(checkpoint)
    proj = export_query_projection(model.conditioner, [m.load_sample(r) for r in m.records])
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text(proj.to_csv())
    scatter_plot(proj, out_csv.with_suffix(".png"))
    return proj
