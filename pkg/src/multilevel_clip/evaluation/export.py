"""Embedding dumps and plot files."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from PIL import Image  # noqa: E402

from .metrics import TOP_KS  # noqa: E402
from .retrieval import _text_rows, image_side_embeddings  # noqa: E402


@torch.no_grad()
def dump_embeddings(model, records, out_path):
    """Write object-level image and text embeddings for external projection.

    Produces ``<out_path>.npy`` (unit-norm ``float32`` rows: all image rows, then
    all text rows) and ``<out_path>.tsv`` (``modality``, ``scene_id``, ``label``
    per row, same order). Returns both paths.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.eval()
    img, labels = image_side_embeddings(model, records, "object")
    txt = _text_rows(model, labels, "object")
    matrix = torch.cat([F.normalize(img, dim=-1), F.normalize(txt, dim=-1)]).float().numpy()
    scene_ids = [rec.scene_id for rec in records for _ in rec.objects]
    npy, tsv = out_path.with_suffix(".npy"), out_path.with_suffix(".tsv")
    with open(npy, "wb") as fh:
        np.save(fh, matrix, allow_pickle=False)
    lines = ["modality\tscene_id\tlabel"]
    lines += [f"image\t{s}\t{lab}" for s, lab in zip(scene_ids, labels)]
    lines += [f"text\t{s}\t{lab}" for s, lab in zip(scene_ids, labels)]
    tsv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return npy, tsv


def read_embeddings(out_path):
    out_path = Path(out_path)
    matrix = np.load(out_path.with_suffix(".npy"), allow_pickle=False)
    rows = out_path.with_suffix(".tsv").read_text(encoding="utf-8").splitlines()[1:]
    return matrix, [tuple(r.split("\t")) for r in rows]


def save_overlay(path, overlay):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(overlay, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def plot_retrieval_curves(reports, path):
    """Top-K (or R@K) against K for each report, one line per task."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    for rep in reports:
        for prefix in ("top", "R@"):
            ys = [rep.metrics.get(f"{prefix}{k}") for k in TOP_KS]
            if all(y is not None for y in ys):
                ax.plot(TOP_KS, ys, marker="o", label=rep.task)
    ax.set_xlabel("K")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(TOP_KS)
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return Path(path)
