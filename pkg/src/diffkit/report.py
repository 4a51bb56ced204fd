"""Figures and image files written alongside the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import to_bytes  # noqa: E402
from .schedule import ScheduleTable  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(ncols: int = 1):
    fig, axes = plt.subplots(1, ncols, figsize=(3.4 * ncols, 2.6), constrained_layout=True)
    return fig, np.atleast_1d(axes)


def plot_schedules(tables: Sequence[ScheduleTable], path) -> None:
    """beta_t and alpha_bar_t against t, one line per schedule."""
    with plt.rc_context(STYLE):
        fig, (ax_b, ax_a) = _figure(2)
        for table in tables:
            t = np.arange(table.num_train_timesteps)
            ax_b.plot(t, table.betas, label=table.kind)
            ax_a.plot(t, table.alphas_cumprod, label=table.kind)
        ax_b.set_xlabel("t")
        ax_b.set_ylabel(r"$\beta_t$")
        ax_a.set_xlabel("t")
        ax_a.set_ylabel(r"$\bar\alpha_t$")
        ax_a.legend(frameon=False)
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_loss(records: Sequence[dict], path, title: str = "training loss") -> None:
    steps = [r["step"] for r in records if r.get("kind") != "epoch"]
    losses = [r["loss"] for r in records if r.get("kind") != "epoch"]
    with plt.rc_context(STYLE):
        fig, (ax,) = _figure(1)
        ax.plot(steps, losses, lw=0.8, alpha=0.6, label="step")
        if len(losses) >= 20:
            k = max(len(losses) // 20, 2)
            smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
            ax.plot(steps[k - 1 :], smooth, lw=1.4, label=f"mean of {k}")
            ax.legend(frameon=False)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.set_title(title)
        fig.savefig(path, dpi=150)
        plt.close(fig)


def save_png(image: np.ndarray, path) -> None:
    """uint8 [C, H, W] with C in {1, 3} to an 8-bit PNG without alpha."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path)


def image_grid(images: np.ndarray, ncols: int, pad: int = 2) -> np.ndarray:
    """Tile uint8 [N, C, H, W] into one [C, rows*(H+pad)-pad, ncols*(W+pad)-pad] image."""
    n, c, h, w = images.shape
    nrows = -(-n // ncols)
    grid = np.zeros((c, nrows * (h + pad) - pad, ncols * (w + pad) - pad), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, ncols)
        grid[:, r * (h + pad) : r * (h + pad) + h, col * (w + pad) : col * (w + pad) + w] = images[i]
    return grid


def write_samples(images01: np.ndarray, out_dir, ncols: int = 0) -> list[Path]:
    """Per-image PNGs under ``out_dir/images`` plus ``out_dir/grid.png``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    as_bytes = to_bytes(images01)
    paths = []
    for i, img in enumerate(as_bytes):
        p = img_dir / f"{i:05d}.png"
        save_png(img, p)
        paths.append(p)
    ncols = ncols or int(np.ceil(np.sqrt(len(as_bytes))))
    save_png(image_grid(as_bytes, ncols), out_dir / "grid.png")
    return paths
