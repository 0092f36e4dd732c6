"""Matplotlib figures written alongside the delimited benchmark output."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .segmentation import colorize_labels


def plot_loss_curve(loss_csv, out_png, window: int = 200) -> None:
    its, losses = [], []
    with open(loss_csv) as f:
        for row in csv.DictReader(f):
            its.append(int(row["iteration"]))
            losses.append(float(row["loss"]))
    if not its:
        return
    losses = np.asarray(losses)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(its, losses, lw=0.5, alpha=0.4, label="per iteration")
    if len(losses) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(np.arange(len(smooth)) + window - 1, smooth, lw=1.5, label=f"{window}-iter mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("contrastive loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def plot_object_scores(per_object: list, out_png) -> None:
    objs = [row["object"] for row in per_object]
    ious = [row["iou"] for row in per_object]
    accs = [row["acc"] for row in per_object]
    x = np.arange(len(objs))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, ious, width=0.4, label="IoU")
    ax.bar(x + 0.2, accs, width=0.4, label="accuracy")
    ax.set_xticks(x, [f"obj {o}" for o in objs])
    ax.set_ylim(0, 1.05)
    ax.axhline(1.0, color="gray", lw=0.5)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def plot_segmentation_panel(color_img, gt_label_img, pred_label_img, n_clusters, out_png) -> None:
    n_gt = int(np.max(gt_label_img)) if np.size(gt_label_img) else 1
    panels = [
        ("rendered view", np.clip(color_img, 0, 1)),
        ("ground-truth objects", colorize_labels(gt_label_img, max(n_gt, 1))),
        ("predicted clusters", colorize_labels(pred_label_img, max(n_clusters, 1))),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.8))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img)
        ax.set_title(title, fontsize=10)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def plot_sweep(fracs, mious, seconds, out_png) -> None:
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(fracs, mious, "o-", color="tab:blue", label="mIoU")
    ax1.set_xlabel("subsample fraction")
    ax1.set_ylabel("mIoU", color="tab:blue")
    ax1.set_ylim(0, 1.05)
    ax2 = ax1.twinx()
    ax2.plot(fracs, seconds, "s--", color="tab:red", label="clustering time")
    ax2.set_ylabel("seconds", color="tab:red")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
