"""Figures for reports: ROC curves, score series, detection overlays, error grids."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.figure import Figure

X_LABELS = {
    "frame": "false positive rate",
    "pixel": "false positive rate",
    "region": "false positives per frame",
    "track": "false positives per frame",
}


def _save(fig: Figure, path) -> None:
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)


def plot_roc(curve, path) -> None:
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot()
    ax.plot(curve.x, curve.tpr, lw=1.5, color="C0")
    if curve.criterion in ("frame", "pixel"):
        ax.plot([0, 1], [0, 1], ls=":", color="0.6", lw=1)
    ax.set_xlim(0, curve.x_range)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel(X_LABELS.get(curve.criterion, "x"))
    ax.set_ylabel("true positive rate")
    title = f"{curve.criterion}: AUC {curve.auc:.3f}"
    if curve.eer is not None:
        title += f", EER {curve.eer:.3f}"
    ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_frame_scores(series, positive, path) -> None:
    """Score per frame with annotated anomalous frames shaded."""
    series = np.asarray(series)
    fig = Figure(figsize=(7, 2.5))
    ax = fig.add_subplot()
    t = np.arange(series.size)
    if positive is not None:
        ax.fill_between(t, 0, 1, where=np.asarray(positive), step="mid", color="C3", alpha=0.15, lw=0)
    ax.plot(t, series, lw=1, color="C0")
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("max pixel score")
    fig.tight_layout()
    _save(fig, path)


def _rgb(frame):
    g = np.clip(np.asarray(frame, np.float64) / 255.0, 0, 1)
    return np.stack([g, g, g], axis=-1)


def render_overlay(frame, gt_boxes=(), det_boxes=(), det_mask=None, path=None, scale: int = 4):
    """Grayscale frame with ground truth in green and detections in red.

    Returns the RGB image as a uint8 array; writes a PNG when ``path`` is given.
    """
    from PIL import Image

    img = _rgb(frame)
    if det_mask is not None:
        m = np.asarray(det_mask, bool)
        img[m] = img[m] * 0.6 + np.array([1.0, 0.0, 0.0]) * 0.4
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    for boxes, colour in ((gt_boxes, (0.0, 1.0, 0.0)), (det_boxes, (1.0, 0.0, 0.0))):
        for x, y, w, h in boxes:
            x0, y0 = x * scale, y * scale
            x1, y1 = min((x + w) * scale, img.shape[1]) - 1, min((y + h) * scale, img.shape[0]) - 1
            img[y0, x0:x1 + 1] = colour
            img[y1, x0:x1 + 1] = colour
            img[y0:y1 + 1, x0] = colour
            img[y0:y1 + 1, x1] = colour
    out = np.rint(img * 255).astype(np.uint8)
    if path is not None:
        Image.fromarray(out).save(path)
    return out


def plot_error_report(report, pairs, path, columns: int = 4) -> None:
    """Each flagged pair as intensity and motion-magnitude thumbnails with its label and p."""
    entries = report.entries
    if not entries:
        fig = Figure(figsize=(3, 1))
        fig.text(0.5, 0.5, "no pairs", ha="center", va="center")
        _save(fig, path)
        return
    rows = int(np.ceil(len(entries) / columns))
    fig = Figure(figsize=(columns * 2.4, rows * 1.4))
    for k, e in enumerate(entries):
        a, b = pairs.x1[e.index], pairs.x2[e.index]
        for j, (x, tag) in enumerate(((a, "a"), (b, "b"))):
            ax = fig.add_subplot(rows, columns * 2, 2 * k + j + 1)
            # pairs hold [-1, 1] patches: intensity plane, then the strongest motion plane
            thumb = (np.concatenate([x[..., 0], x[..., 1:].max(axis=-1)], axis=1) + 1) / 2
            ax.imshow(thumb, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_title(f"y={e.label} p={e.p:.2f} {e.provenance}", fontsize=6, loc="left")
    fig.tight_layout()
    _save(fig, path)
