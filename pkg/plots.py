"""
plots.py - static figures rendered from report CSV files. Each plot reads
only its CSV so figures regenerate identically from the data files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


PNG_METADATA = {"Software": None}


def _save(fig, png_path):
    fig.tight_layout()
    fig.savefig(png_path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)


def plot_recall_comparison(csv_path, png_path):
    frame = pd.read_csv(csv_path)
    labels = [f"{m}\n{a}" for m, a in zip(frame["mode"], frame["attack"])]
    x = np.arange(len(frame))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(frame)), 4))
    ax.bar(x - 0.2, frame["rec_maj"], width=0.4, label="Rec-maj")
    ax.bar(x + 0.2, frame["rec_min"], width=0.4, label="Rec-min")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("recall (%)")
    ax.legend()
    _save(fig, png_path)


def plot_gradient_distribution(csv_path, png_path):
    frame = pd.read_csv(csv_path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, prefix, title in ((axes[0], "grad_raw", "raw gradient"), (axes[1], "grad_hat", "reweighted gradient")):
        for suffix, color in (("minority", "tab:red"), ("majority", "tab:blue")):
            values = frame[f"{prefix}_{suffix}"].dropna()
            ax.hist(values, bins=30, alpha=0.6, color=color, label=suffix)
        ax.set_title(title)
        ax.set_xlabel("mean pair magnitude")
        ax.legend()
    axes[0].set_ylabel("steps")
    _save(fig, png_path)


def plot_embedding_projection(csv_path, png_path):
    frame = pd.read_csv(csv_path)
    sizes = 5.0 + 60.0 * frame["alpha"] / max(float(frame["alpha"].max()), 1e-12)
    fig, ax = plt.subplots(figsize=(5, 5))
    for minority, color, label in ((0, "tab:blue", "majority"), (1, "tab:red", "minority")):
        subset = frame["minority"] == minority
        ax.scatter(frame.loc[subset, "pc1"], frame.loc[subset, "pc2"], s=sizes[subset], c=color,
                   alpha=0.5, label=label, linewidths=0)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend()
    _save(fig, png_path)


def plot_attention_heatmap(csv_path, png_path):
    frame = pd.read_csv(csv_path)
    attention = frame.pivot(index="segment", columns="node", values="attention").to_numpy()
    nonzero = frame.pivot(index="segment", columns="node", values="nonzero").to_numpy()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, matrix, title in ((axes[0], attention, "att_sg + att_sp"), (axes[1], nonzero, "non-zero labels")):
        image = ax.imshow(matrix, aspect="auto", interpolation="nearest", cmap="viridis")
        ax.set_title(title)
        ax.set_xlabel("node")
        ax.set_ylabel("segment")
        fig.colorbar(image, ax=ax)
    _save(fig, png_path)
