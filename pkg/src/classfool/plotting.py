"""
Figures for attack traces, reports, hop traces and distance tables.

Everything renders with the Agg backend straight to files; PNG metadata is
stripped of the software tag so reruns produce identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def new_figure(width=5.0, height=None, **kwargs):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height or width * golden), **kwargs)


def save_figure(fig, path, fmt="png"):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format=fmt, metadata={"Software": None})
    plt.close(fig)


def plot_trace(trace, path, gamma=None, title=None):
    """Fooling ratio and perturbation norms against iteration."""
    fig, ax = new_figure()
    recs = trace.records
    phases = sorted({r.get("phase", 0) for r in recs}, key=str)
    offset = 0
    for phase in phases:
        rs = [r for r in recs if r.get("phase", 0) == phase]
        t = np.array([r["t"] for r in rs]) + offset
        ax.plot(t, [r["ratio"] for r in rs], marker=".", lw=1, label=f"phase {phase}" if len(phases) > 1 else "ratio")
        if isinstance(phase, int) and len(phases) > 1:
            offset = t[-1]
    if gamma is not None:
        ax.axhline(gamma, color="0.5", ls="--", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("fooling ratio")
    ax.set_ylim(-0.02, 1.02)
    ax2 = ax.twinx()
    ax2.plot(np.arange(len(recs)), [r["linf"] for r in recs], color="0.6", lw=0.6)
    ax2.set_ylabel(r"$\|p\|_\infty$", color="0.5")
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    save_figure(fig, path)


def plot_report(report, path):
    fig, ax = new_figure()
    classes = sorted(report.per_class_target_rate)
    rates = [report.per_class_target_rate[c] for c in classes]
    ax.bar([str(c) for c in classes], rates, color="0.6", label="non-source")
    ax.bar([str(report.source_label)], [report.fooling_ratio], color="C3", label="source")
    ax.axhline(report.leakage, color="C0", ls="--", lw=0.8, label=f"leakage {report.leakage:.3f}")
    ax.set_xlabel("true class")
    ax.set_ylabel(f"rate predicted as {report.target_label}")
    ax.set_ylim(0, 1.02)
    ax.legend()
    save_figure(fig, path)


def plot_hops(hop, path, target=None):
    fig, ax = new_figure()
    if hop.entries:
        t, labels, counts = zip(*hop.entries)
        ax.step(t, labels, where="post", color="0.3", lw=1)
        ax.scatter(t, labels, s=8 + 40 * np.asarray(counts) / max(counts), color="C0", zorder=3)
    if target is not None:
        ax.axhline(target, color="C3", ls="--", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("max non-source label")
    ax.set_title(f"source {hop.source_label}")
    save_figure(fig, path)


def plot_distance_table(table, path):
    classes = table.classes
    n = len(classes)
    grid = np.full((n, n), np.nan)
    for i, a in enumerate(classes):
        for j, b in enumerate(classes):
            cell = table.cell(a, b) if a != b else None
            if cell is not None:
                grid[i, j] = cell[0]
    fig, ax = new_figure(width=1.2 * n + 1.5, height=1.2 * n + 0.5)
    im = ax.imshow(grid, cmap="viridis")
    for i in range(n):
        for j in range(n):
            if i != j:
                cell = table.cell(classes[i], classes[j])
                text = "n/a" if cell is None else f"{cell[0]:.0f}\n±{cell[1]:.0f}"
                ax.text(j, i, text, ha="center", va="center", color="w", fontsize=7)
    ax.set_xticks(range(n), [str(c) for c in classes])
    ax.set_yticks(range(n), [str(c) for c in classes])
    ax.set_xlabel("target")
    ax.set_ylabel("source")
    fig.colorbar(im, ax=ax, label=r"mean $\|p\|_2$")
    save_figure(fig, path)


def plot_image_grid(images, path, ncols=8, titles=None):
    images = np.asarray(images)
    n = len(images)
    nrows = int(np.ceil(n / ncols))
    fig, axes = new_figure(width=ncols * 0.9, height=nrows * 0.9 + 0.2, nrows=nrows, ncols=ncols, squeeze=False)
    for k, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if k < n:
            img = images[k]
            ax.imshow(img[..., 0] if img.shape[-1] == 1 else img.astype(np.uint8), cmap="gray", vmin=0, vmax=255)
            if titles is not None:
                ax.set_title(str(titles[k]), fontsize=6)
    save_figure(fig, path)
