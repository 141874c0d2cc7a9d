"""Report figures rendered to PNG files (headless Agg backend)."""
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_metrics(path):
    steps, bits = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["split"] == "train":
                steps.append(int(row["step"]))
                bits.append(float(row["bits_per_sample"]))
    return np.array(steps), np.array(bits)


def loss_curve(metrics_path, out_path, smooth=50):
    steps, bits = read_metrics(metrics_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, bits, lw=0.5, alpha=0.4, label="per step")
    if len(bits) >= smooth:
        k = np.ones(smooth) / smooth
        ax.plot(steps[smooth - 1:], np.convolve(bits, k, mode="valid"), lw=1.5, label=f"mean of {smooth}")
    ax.axhline(8.0, color="grey", ls=":", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("bits / sample")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def f0_tracks(measured, expected, out_path, title=""):
    """Measured F0 of a conversion against the target-range-mapped source contour."""
    fig, ax = plt.subplots(figsize=(6, 3))
    t = np.arange(len(expected)) * measured.frame_period_sec
    exp = np.where(expected > 0, expected, np.nan)
    got = np.where(measured.voiced, measured.f0_hz, np.nan)[: len(t)]
    ax.plot(t, exp, lw=2, alpha=0.6, label="expected")
    ax.plot(t[: len(got)], got, ".", ms=3, label="measured")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("F0 (Hz)")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def timbre_grid(results, templates, out_path):
    """Mean measured harmonic profile per target speaker next to its template."""
    targets = sorted({r.plan.target for r in results if r.report is not None}, key=int)
    fig, axes = plt.subplots(1, max(len(targets), 1), figsize=(3 * max(len(targets), 1), 2.8), squeeze=False)
    for ax, tgt in zip(axes[0], targets):
        profs = np.array([r.report.profile for r in results if r.report is not None and r.plan.target == tgt])
        k = np.arange(1, profs.shape[1] + 1)
        ax.bar(k - 0.2, templates[int(tgt)].profile, width=0.4, label="template")
        ax.bar(k + 0.2, profs.mean(axis=0), width=0.4, label="converted")
        ax.set_title(f"target {tgt}")
        ax.set_xlabel("harmonic")
    axes[0][0].legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def pair_matrix(results, out_path, field="timbre_score"):
    """Mean of a report field per (source, target) pair."""
    ids = sorted({r.plan.source for r in results} | {r.plan.target for r in results}, key=int)
    pos = {s: i for i, s in enumerate(ids)}
    grid = np.full((len(ids), len(ids)), np.nan)
    sums, counts = np.zeros_like(grid), np.zeros_like(grid)
    for r in results:
        if r.report is None:
            continue
        i, j = pos[r.plan.source], pos[r.plan.target]
        sums[i, j] += getattr(r.report, field)
        counts[i, j] += 1
    np.divide(sums, counts, out=grid, where=counts > 0)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(grid, cmap="RdBu", vmin=-1, vmax=1)
    ax.set_xticks(range(len(ids)), ids)
    ax.set_yticks(range(len(ids)), ids)
    ax.set_xlabel("target")
    ax.set_ylabel("source")
    ax.set_title(field.replace("_", " "))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
