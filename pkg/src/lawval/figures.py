"""Report figures: confusion matrix and provenance breakdown rendered to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .taskform import PROVENANCES


def _confusion_figure(doc: dict, path: Path) -> None:
    counts = doc["counts"]
    # Rows are gold (1 then 0), columns are predicted (1 then 0).
    grid = [[counts["tp"], counts["fn"]], [counts["fp"], counts["tn"]]]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    image = ax.imshow(grid, cmap="Blues")
    ax.set_xticks([0, 1], labels=["1", "0"])
    ax.set_yticks([0, 1], labels=["1", "0"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    peak = max(max(row) for row in grid) or 1
    for row in range(2):
        for col in range(2):
            value = grid[row][col]
            ax.text(
                col,
                row,
                str(value),
                ha="center",
                va="center",
                color="white" if value > peak / 2 else "black",
            )
    ax.set_title(
        f"accuracy {doc['accuracy_pct']:.2f}%  F1+ {doc['f1_positive_pct']:.2f}%"
    )
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def _provenance_figure(doc: dict, path: Path) -> None:
    provenance = doc.get("provenance", {})
    values = [provenance.get(name, 0) for name in PROVENANCES]
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.bar(range(len(PROVENANCES)), values, color=["#4878a8", "#d1a038", "#b04a4a"])
    ax.set_xticks(range(len(PROVENANCES)), labels=PROVENANCES)
    ax.set_ylabel("predictions")
    ax.set_title("prediction provenance")
    for x, value in enumerate(values):
        ax.text(x, value, str(value), ha="center", va="bottom")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_report_figures(doc: dict, out_dir: str | Path) -> list[Path]:
    """Render the report document's figures next to the text outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    confusion_path = out / "confusion_matrix.png"
    provenance_path = out / "provenance.png"
    _confusion_figure(doc, confusion_path)
    _provenance_figure(doc, provenance_path)
    return [confusion_path, provenance_path]
