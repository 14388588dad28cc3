"""Report rendering: delimited metric files plus matplotlib figures for
training curves, per-category AP, and detection overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

LOSS_COLUMNS = ("margin", "margin_rank", "ce", "box", "rpn_obj", "rpn_box", "total")


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return {name: rows[:, i] for i, name in enumerate(header)}


def save_loss_curves(metrics_path, out_png) -> Path:
    cols = read_metrics_csv(metrics_path)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(cols["step"], cols["total"], lw=1.2, color="tab:blue")
    ax1.set_xlabel("step")
    ax1.set_ylabel("total loss")
    ax1.set_title("total")
    for name in ("margin", "margin_rank", "ce", "box"):
        ax2.plot(cols["step"], cols[name], lw=1.0, label=name)
    ax2.set_xlabel("step")
    ax2.legend(fontsize=8)
    ax2.set_title("scoring terms")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_ap_bars(report: EvalReport, out_png) -> Path:
    cats = sorted(report.per_category_ap50)
    vals = [report.per_category_ap50[c] for c in cats]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(cats)), 3.5))
    ax.bar(cats, vals, color="tab:orange")
    ax.axhline(report.ap50, color="k", lw=0.8, ls="--",
               label=f"mean AP@50 = {report.ap50:.3f}")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("AP@50")
    ax.set_title(f"split={report.split}  N={report.n_queries}  fusion={report.fusion}")
    ax.legend(fontsize=8)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def report_csv_text(report: EvalReport) -> str:
    lines = ["category,ap50"]
    for cat in sorted(report.per_category_ap50):
        lines.append(f"{cat},{report.per_category_ap50[cat]:.9g}")
    lines.append(f"__all__,{report.ap50:.9g}")
    lines.append(f"__map__,{report.map:.9g}")
    return "\n".join(lines) + "\n"


def write_report_files(report: EvalReport, out_dir, stem: str = "report") -> dict[str, Path]:
    """Write report.json + report.csv + the AP figure into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "figure": out_dir / f"{stem}_ap50.png",
    }
    paths["json"].write_text(report.to_json())
    paths["csv"].write_text(report_csv_text(report))
    save_ap_bars(report, paths["figure"])
    return paths


def save_detection_overlay(image: np.ndarray, detections: list[dict], out_png,
                           attention: np.ndarray | None = None,
                           gt_boxes=None, score_threshold: float = 0.0) -> Path:
    """Render detections (and optionally the attention heatmap) over the image.

    The output raster has exactly the input image's pixel dimensions.
    """
    h, w = image.shape[:2]
    fig = plt.figure(figsize=(w / 100.0, h / 100.0), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(image, extent=(0, w, h, 0))
    if attention is not None:
        ax.imshow(attention, extent=(0, w, h, 0), cmap="jet", alpha=0.35)
    if gt_boxes is not None:
        for b in gt_boxes:
            ax.add_patch(plt.Rectangle((b[0], b[1]), b[2] - b[0], b[3] - b[1],
                                       fill=False, edgecolor="white", lw=1.0, ls=":"))
    for det in detections:
        if det["score"] < score_threshold:
            continue
        b = det["box"]
        ax.add_patch(plt.Rectangle((b[0], b[1]), b[2] - b[0], b[3] - b[1],
                                   fill=False, edgecolor="red", lw=1.2))
        ax.text(b[0] + 1, b[1] + 6, f"{det['score']:.2f}", color="red", fontsize=6)
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)
