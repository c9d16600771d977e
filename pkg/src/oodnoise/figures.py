"""Report figures rendered to files alongside the CSV output.

All figures consume the assembled EvalReport rows and write PNGs into the
run's ``figures/`` directory.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _cell_medians(report):
    """(dataset, arch, noise_tag, seed, ckpt, ls, detector) -> (median, mean, acc)."""
    return report.median_by_cell()


def fig_noise_degradation(report, path: Path) -> Path:
    """Median AUROC per detector as a function of the injected noise rate."""
    rates = {nz.tag: nz.rate for nz in report.config.noise}
    per_detector: dict[str, dict[float, list[float]]] = {}
    for key, (median, _, _) in _cell_medians(report).items():
        _, _, nz, _, _, _, detector = key
        per_detector.setdefault(detector, {}).setdefault(rates[nz], []).append(median)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for detector in sorted(per_detector):
        pts = sorted((r, float(np.median(v))) for r, v in per_detector[detector].items())
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", lw=1,
                ms=3, alpha=0.8, label=detector)
    ax.set_xlabel("training label noise rate")
    ax.set_ylabel("median AUROC (ID vs OOD)")
    ax.set_title("OOD detection degradation under label noise")
    ax.legend(fontsize=6, ncol=2, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def fig_accuracy_vs_auroc(report, path: Path) -> Path:
    """Accuracy against overall and incorrect-only AUROC, one point per cell."""
    overall: dict[str, list] = {}
    incorrect: dict[str, list] = {}
    grouped: dict[tuple, list] = {}
    for row in report.rows:
        grouped.setdefault(row.group_key, []).append(row)
    for key, rows in grouped.items():
        detector = key[-1]
        acc = rows[0].id_accuracy
        overall.setdefault(detector, []).append(
            (acc, float(np.median([r.auroc_id for r in rows]))))
        inc = [r.auroc_incorrect for r in rows if r.auroc_incorrect is not None]
        if inc:
            incorrect.setdefault(detector, []).append((acc, float(np.median(inc))))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2), sharex=True, sharey=True)
    for ax, data, title in ((axes[0], overall, "AUROC (all ID)"),
                            (axes[1], incorrect, "AUROC (incorrect ID only)")):
        for detector in sorted(data):
            pts = np.asarray(data[detector])
            ax.scatter(pts[:, 0], pts[:, 1], s=8, alpha=0.6, label=detector)
        ax.axhline(0.5, color="gray", lw=0.8, ls="--")
        ax.set_xlabel("ID test accuracy")
        ax.set_title(title)
    axes[0].set_ylabel("median AUROC vs OOD")
    if incorrect:
        axes[1].legend(fontsize=6, ncol=2, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def fig_auroc_distribution(report, path: Path) -> Path:
    """Distribution of per-cell median AUROC for each noise tag."""
    by_tag: dict[str, list[float]] = {}
    for key, (median, _, _) in _cell_medians(report).items():
        by_tag.setdefault(key[2], []).append(median)
    tags = [nz.tag for nz in report.config.noise if nz.tag in by_tag]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.violinplot([by_tag[t] for t in tags], showmedians=True)
    ax.set_xticks(range(1, len(tags) + 1), tags)
    ax.set_xlabel("training label set")
    ax.set_ylabel("median AUROC (ID vs OOD)")
    ax.set_title("Score distribution across detectors and models")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_all(report, figures_dir) -> list[Path]:
    figures_dir = Path(figures_dir)
    figures_dir.mkdir(parents=True, exist_ok=True)
    out = [
        fig_noise_degradation(report, figures_dir / "noise_degradation.png"),
        fig_accuracy_vs_auroc(report, figures_dir / "accuracy_vs_auroc.png"),
        fig_auroc_distribution(report, figures_dir / "auroc_distribution.png"),
    ]
    return out
