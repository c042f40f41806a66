"""Figure rendering for the CLI report paths.

All figures go to files (Agg backend); nothing opens a window. Outputs are
deterministic so pipeline reruns stay byte-identical.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_META = {"Software": "spatialdiar"}


def save_der_figure(reports: dict, path) -> None:
    """Stacked FA/MISS/SpkErr bars, one bar per labelled report."""
    labels = list(reports)
    fa = [reports[l].fa for l in labels]
    miss = [reports[l].miss for l in labels]
    spkerr = [reports[l].spkerr for l in labels]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(labels), 3.6))
    ax.bar(x, fa, label="FA", color="#4878d0")
    ax.bar(x, miss, bottom=fa, label="MISS", color="#ee854a")
    bottom = np.asarray(fa) + np.asarray(miss)
    ax.bar(x, spkerr, bottom=bottom, label="SpkErr", color="#d65f5f")
    for i, label in enumerate(labels):
        ax.text(i, reports[label].der + 0.3, f"{reports[label].der:.2f}",
                ha="center", fontsize=8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("% of reference speaker time")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def save_activity_figure(matrices: dict, frame_rate: float, path) -> None:
    """Speaker-activity rasters (frames x speakers), one panel per label."""
    fig, axes = plt.subplots(
        len(matrices), 1, figsize=(8, 1.1 * sum(
            np.asarray(m).shape[1] for m in matrices.values()) + 1.2),
        squeeze=False,
    )
    for ax, (label, matrix) in zip(axes[:, 0], matrices.items()):
        matrix = np.asarray(matrix, dtype=float)
        extent = (0.0, matrix.shape[0] / frame_rate, -0.5, matrix.shape[1] - 0.5)
        ax.imshow(matrix.T, aspect="auto", origin="lower",
                  interpolation="nearest", cmap="Greys", extent=extent,
                  vmin=0.0, vmax=1.0)
        ax.set_ylabel(label, fontsize=8)
        ax.set_yticks(range(matrix.shape[1]))
    axes[-1, 0].set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def save_beta_figure(beta: np.ndarray, frame_rate: float, threshold: float,
                     path) -> None:
    """Per-speaker frequency-averaged posterior curves with the VAD threshold."""
    beta = np.asarray(beta)
    times = np.arange(beta.shape[0]) / frame_rate
    fig, ax = plt.subplots(figsize=(8, 2.6))
    for k in range(beta.shape[1]):
        ax.plot(times, beta[:, k], linewidth=0.8, label=f"spk{k}")
    ax.axhline(threshold, color="k", linestyle="--", linewidth=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("mean posterior")
    ax.legend(fontsize=7, ncol=4)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
