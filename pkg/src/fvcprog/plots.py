"""Figure rendering for report artifacts (SVG files next to the CSV output).

Uses the Agg backend and pins matplotlib's hash salt / date metadata so an
identical run produces byte-identical SVG files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import DistributionFit  # noqa: E402


def _save_svg(fig, out_path, run_header=None):
    metadata = {"Date": None}
    if run_header is not None:
        metadata["Title"] = run_header
    fig.savefig(out_path, format="svg", metadata=metadata)
    plt.close(fig)


def _new_figure(width: float = 7.0, height: float = 4.5):
    plt.rcParams["svg.hashsalt"] = "fvcprog"
    return plt.subplots(figsize=(width, height))


def render_distribution_figure(fit: DistributionFit, out_path: str | Path,
                               title: str = "FVC distribution",
                               run_header: str | None = None) -> None:
    """Histogram with the fitted Gaussian and Laplace densities overlaid."""
    fig, ax = _new_figure()
    centers = (fit.bin_edges[:-1] + fit.bin_edges[1:]) / 2.0
    widths = fit.bin_edges[1:] - fit.bin_edges[:-1]
    total = fit.counts.sum()
    density = fit.counts / (total * widths)
    ax.bar(centers, density, width=widths, color="#9ecae1", edgecolor="white",
           label="data")
    ax.plot(centers, fit.gaussian_pdf(centers), color="#d62728", lw=1.8,
            label=f"Gaussian ({fit.gaussian_mean:.1f}, {fit.gaussian_sd:.1f})")
    ax.plot(centers, fit.laplace_pdf(centers), color="#2ca02c", lw=1.8,
            label=f"Laplace ({fit.laplace.mu:.1f}, {fit.laplace.b:.1f})")
    ax.set_xlabel("FVC (mL)")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save_svg(fig, out_path, run_header)


def render_loss_curves(entries: list[dict], out_path: str | Path,
                       run_header: str | None = None) -> None:
    """Per-fold training loss (and validation LLL where logged) vs epoch."""
    folds = sorted({e["fold"] for e in entries})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 4.0))
    plt.rcParams["svg.hashsalt"] = "fvcprog"
    for fold in folds:
        rows = [e for e in entries if e["fold"] == fold]
        epochs = [e["epoch"] for e in rows]
        ax1.plot(epochs, [e["train_loss"] for e in rows], lw=1.2,
                 label=f"fold {fold}")
        val = [(e["epoch"], e["val_lll"]) for e in rows if e["val_lll"] is not None]
        if val:
            ax2.plot([v[0] for v in val], [v[1] for v in val], lw=1.2,
                     label=f"fold {fold}")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train L1 loss (standardized)")
    ax1.set_title("training loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation LLL")
    ax2.set_title("validation Laplace log-likelihood")
    ax1.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save_svg(fig, out_path, run_header)
