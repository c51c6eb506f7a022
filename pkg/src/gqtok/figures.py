"""Matplotlib renderings of the CSV reports, written next to the delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_loss_curves(reports, path) -> None:
    """Training curves: losses on the left, entropies and usage on the right."""
    steps = [r.step for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(steps, [r.recon for r in reports], label="recon")
    ax1.plot(steps, [r.total for r in reports], label="total", alpha=0.7)
    if any(r.gan_d for r in reports):
        ax1.plot(steps, [r.gan_d for r in reports], label="disc", alpha=0.7)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(steps, [r.token_h for r in reports], label="token H (nats)")
    ax2.plot(steps, [r.codebook_h for r in reports], label="codebook H (nats)")
    ax2.set_xlabel("step")
    ax2.set_ylabel("nats")
    ax2.legend(loc="upper left")
    twin = ax2.twinx()
    twin.plot(steps, [r.usage_mean for r in reports], color="tab:red", ls="--", label="usage")
    twin.set_ylabel("codebook usage")
    twin.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_oracle_gap(rows, path) -> None:
    """Codebook-entropy approximation gap vs group count, one line per d."""
    fig, ax = plt.subplots(figsize=(6, 4))
    by_d: dict[int, dict[int, list[float]]] = {}
    for r in rows:
        by_d.setdefault(r["d"], {}).setdefault(r["g"], []).append(r["codebook_gap_nats"])
    for d, gaps in sorted(by_d.items()):
        gs = sorted(gaps)
        ax.plot(gs, [np.mean(gaps[g]) for g in gs], marker="o", label=f"d={d}")
    ax.set_xlabel("groups g")
    ax.set_ylabel("codebook entropy gap (nats)")
    ax.set_xscale("log", base=2)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_memory_sweep(rows, path) -> None:
    """Grouped vs hypothetical ungrouped entropy-buffer bytes per configuration."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"g={r['g']},d'={r['d_prime']}" for r in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [float(r["grouped_bytes"]) for r in rows], width=0.4, label="grouped")
    ax.bar(x + 0.2, [float(r["ungrouped_bytes"]) for r in rows], width=0.4, label="ungrouped")
    ax.axhline(2**34, color="tab:red", ls="--", lw=1, label="16 GiB budget")
    ax.set_yscale("log")
    ax.set_xticks(x, labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("bytes")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_image_pair(orig, recon, report, path) -> None:
    """Original vs reconstruction with the metric readout in the title."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.6))
    for ax, img, name in zip(axes, (orig, recon), ("original", "reconstruction")):
        shown = img[:, :, 0] if img.shape[2] == 1 else img
        ax.imshow(shown, cmap="gray" if img.shape[2] == 1 else None, vmin=0, vmax=255)
        ax.set_title(name)
        ax.axis("off")
    fig.suptitle(f"psnr={report.psnr:.2f} dB  ssim={report.ssim:.4f}  mse={report.mse:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
