"""Static PNG figures rendered next to the delimited report files.

Rendering is headless (Agg) and stateless: every function builds its own
Figure object, so no pyplot global state leaks between calls and repeated
runs produce byte-identical files.

Conventions shared across figures: CBIR in black/grey, the softmax reference
in red, per-query pairings drawn as connecting line segments.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Mapping

import matplotlib

matplotlib.use("Agg", force=True)

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

if TYPE_CHECKING:
    from .metrics import RocAnalysis

CBIR_COLOR = "black"
SOFTMAX_COLOR = "#c21f1f"
SAME_COLOR = "#2a5fa8"
DIFF_COLOR = "#c21f1f"
_DPI = 120


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=_DPI)
    return path


def accuracy_vs_k(path, source: str, accuracy_by_k: Mapping[int, float], softmax_accuracy) -> Path:
    """Accuracy against the number of retrieved images, softmax as a flat line."""
    ks = sorted(accuracy_by_k)
    fig = Figure(figsize=(5.0, 3.6))
    ax = fig.add_subplot(111)
    ax.plot(
        ks, [accuracy_by_k[k] for k in ks],
        color=CBIR_COLOR, marker="o", markersize=3, linewidth=1.2, label="CBIR",
    )
    ax.axhline(
        float(softmax_accuracy), color=SOFTMAX_COLOR, linewidth=1.2, label="softmax"
    )
    ax.set_xlabel("retrieved images (k)")
    ax.set_ylabel("accuracy")
    ax.set_title(source)
    ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def roc_curves(path, source: str, curves: Mapping[str, "RocAnalysis"]) -> Path:
    """All configured operating curves for one source on a single ROC plane."""
    fig = Figure(figsize=(4.6, 4.4))
    ax = fig.add_subplot(111)
    greys = [str(0.75 - 0.55 * i / max(1, sum(n != "softmax" for n in curves) - 1))
             for i in range(len(curves))]
    gi = 0
    for name, roc in curves.items():
        fpr = 1.0 - roc.specificity
        if name == "softmax":
            color, width = SOFTMAX_COLOR, 1.6
        else:
            color, width = greys[gi], 1.1
            gi += 1
        ax.plot(fpr, roc.sensitivity, color=color, linewidth=width,
                label=f"{name} (AUC {roc.auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.85", linewidth=0.8, linestyle="--")
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_title(source)
    ax.legend(loc="lower right", frameon=False, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def map_grid(path, grid) -> Path:
    """mAP of every retrieval source per k, one panel per (network, test) pair."""
    pairs = list(grid.softmax_cells)
    cbir_sources = sorted({key[2] for key in grid.cells})
    networks = sorted({p[0] for p in pairs})
    tests = sorted({p[1] for p in pairs})
    fig = Figure(figsize=(3.0 * len(tests), 2.6 * len(networks)))
    axes = fig.subplots(len(networks), len(tests), squeeze=False, sharey=True)
    for r, net in enumerate(networks):
        for c, test in enumerate(tests):
            ax = axes[r][c]
            for i, cbir in enumerate(cbir_sources):
                values = [grid.cells[(net, test, cbir, k)].map_value for k in grid.k_list]
                ax.plot(grid.k_list, values, color=str(0.1 + 0.5 * i / max(1, len(cbir_sources) - 1)),
                        marker="o", markersize=2.5, linewidth=1.0, label=f"CBIR {cbir}")
            ax.axhline(grid.softmax_cells[(net, test)].map_value,
                       color=SOFTMAX_COLOR, linewidth=1.2, label="softmax")
            ax.set_title(f"train {net} / test {test}", fontsize=8)
            if r == len(networks) - 1:
                ax.set_xlabel("k", fontsize=8)
            if c == 0:
                ax.set_ylabel("mAP", fontsize=8)
            ax.tick_params(labelsize=7)
    handles, labels = axes[0][0].get_legend_handles_labels()
    fig.legend(handles, labels, loc="lower center", ncol=len(labels),
               frameon=False, fontsize=7)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    return _save(fig, path)


def _stars(test) -> tuple[str, str]:
    """Significance marker and its color, following the report's conventions.

    Adjusted p drives the marker; subgroups omitted by the step-down stop
    rule show their raw p in grey instead.
    """
    p = test.p_value if test.not_evaluated else test.p_adjusted
    color = "0.55" if test.not_evaluated else "black"
    if p is None:
        return "", color
    if p < 0.001:
        mark = "***"
    elif p < 0.01:
        mark = "**"
    elif p < 0.05:
        mark = "*"
    else:
        mark = "NS"
    if test.test == "wilcoxon":
        mark = "W " + mark
    return mark, color


def similarity_pairs(path, report) -> Path:
    """Per-class paired same/different similarity means with per-query segments."""
    labels = [t.label for t in report.per_class]
    by_label = {lbl: [r for r in report.rows if r.label == lbl] for lbl in labels}
    fig = Figure(figsize=(max(4.0, 1.1 * len(labels) + 1.5), 4.0))
    ax = fig.add_subplot(111)
    for x, lbl in enumerate(labels):
        for row in by_label[lbl]:
            ax.plot([x - 0.18, x + 0.18], [row.mean_same, row.mean_diff],
                    color="0.8", linewidth=0.5, zorder=1)
        ax.scatter([x - 0.18] * len(by_label[lbl]),
                   [r.mean_same for r in by_label[lbl]],
                   s=9, color=SAME_COLOR, zorder=2)
        ax.scatter([x + 0.18] * len(by_label[lbl]),
                   [r.mean_diff for r in by_label[lbl]],
                   s=9, color=DIFF_COLOR, zorder=2)
    top = max(max(r.mean_same, r.mean_diff) for r in report.rows)
    bottom = min(min(r.mean_same, r.mean_diff) for r in report.rows)
    pad = 0.06 * (top - bottom or 1.0)
    for x, test in enumerate(report.per_class):
        mark, color = _stars(test)
        ax.text(x, top + pad, mark, ha="center", va="bottom",
                fontsize=8, color=color)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylim(bottom - pad, top + 3.5 * pad)
    ax.set_ylabel("mean cosine similarity")
    ax.set_title(
        f"same-label (blue) vs different-label (red) retrieval similarity\n"
        f"queries: {report.test_source}, pool: {report.retrieval_source}",
        fontsize=9,
    )
    fig.tight_layout()
    return _save(fig, path)
