"""Static figures written next to the CSV/JSON reports."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
}
MODEL_COLOR = "#1f5fa8"
BASELINE_COLOR = "#9a9a9a"
KEY_COLOR = "#c0392b"


def _grid(n, ncols=4, size=(2.6, 2.2)):
    ncols = min(ncols, n)
    nrows = int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(size[0] * ncols, size[1] * nrows), squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.set_visible(False)
    return fig, axes.ravel()


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_metric_curves(report, out_dir, fmt: str = "png") -> list:
    """RMSE and ACC against lead time for each key variable, model vs persistence."""
    out = []
    lead = np.asarray(report.lead_hours)
    with plt.rc_context(STYLE):
        for metric, model_vals, base_vals in (
            ("rmse", report.rmse, report.persistence_rmse),
            ("acc", report.acc, report.persistence_acc),
        ):
            fig, axes = _grid(len(report.variables))
            for j, (ax, name) in enumerate(zip(axes, report.variables)):
                ax.plot(lead, np.ma.filled(model_vals[j], np.nan), color=MODEL_COLOR, lw=1.4, label="model")
                ax.plot(lead, np.ma.filled(base_vals[j], np.nan), color=BASELINE_COLOR, lw=1.0, ls="--",
                        label="persistence")
                ax.set_title(name)
                ax.set_xlabel("lead time (h)")
                ax.set_ylabel(metric.upper())
            axes[0].legend(frameon=False)
            out.append(_save(fig, Path(out_dir) / f"{metric}_vs_lead.{fmt}"))
    return out


def plot_attribution(result, channel_names, key_indices, path) -> Path:
    """Bar chart of mean |IG| per input channel, one panel per target; top two labelled."""
    key = set(key_indices)
    n = len(result.target_names)
    C = result.magnitudes.shape[1]
    with plt.rc_context(STYLE):
        fig, axes = _grid(n, ncols=2, size=(5.0, 1.8))
        x = np.arange(C)
        colors = [KEY_COLOR if i in key else MODEL_COLOR for i in range(C)]
        for ax, name, row in zip(axes, result.target_names, result.magnitudes):
            ax.bar(x, row, color=colors, width=0.8)
            for i in np.argsort(-row)[:2]:
                ax.annotate(channel_names[i], (i, row[i]), textcoords="offset points", xytext=(0, 2),
                            ha="center", fontsize=7)
            ax.set_title(f"{result.target}: {name}")
            ax.set_xlim(-1, C)
            ax.set_xlabel("input channel")
        return _save(fig, path)


def plot_correlation(self_corr, cross_corr, catalog, path) -> Path:
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(2, 1, figsize=(max(6.0, 0.09 * catalog.C + 2), 6.0),
                                     gridspec_kw={"height_ratios": [1, 1]})
        im = a0.imshow(np.abs(np.ma.filled(self_corr, np.nan)), vmin=0, vmax=1, cmap="viridis")
        a0.set_title("|corr| between key variables")
        a0.set_xticks(range(catalog.c), catalog.key_names, rotation=90, fontsize=6)
        a0.set_yticks(range(catalog.c), catalog.key_names, fontsize=6)
        fig.colorbar(im, ax=a0, fraction=0.03)
        im = a1.imshow(np.abs(np.ma.filled(cross_corr, np.nan)), vmin=0, vmax=1, cmap="viridis", aspect="auto")
        a1.set_title("|corr| key vs all inputs (key channels in red)")
        a1.set_yticks(range(catalog.c), catalog.key_names, fontsize=6)
        a1.set_xticks(range(catalog.C), [str(i) for i in range(catalog.C)], fontsize=5, rotation=90)
        for lbl in a1.get_xticklabels():
            if int(lbl.get_text()) in catalog.key_indices:
                lbl.set_color(KEY_COLOR)
        fig.colorbar(im, ax=a1, fraction=0.03)
        return _save(fig, path)


def plot_training_log(log_csv, path) -> Path:
    with open(log_csv) as f:
        rows = list(csv.DictReader(f))
    step = np.array([int(r["step"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.0))
        for col in ("loss_key", "loss_recon", "loss_latent", "loss_total"):
            v = np.array([float(r[col]) for r in rows])
            ax.plot(step, v, lw=0.8 if col != "loss_total" else 1.4, label=col[5:])
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=4)
        return _save(fig, path)
