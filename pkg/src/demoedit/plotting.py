"""Static figures for ``demoedit inspect``."""

from __future__ import annotations

from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import DemoRecording  # noqa: E402


def write_figures(demo: DemoRecording, out_dir) -> List[Path]:
    """Depth and mask of the first and last frame per view, plus the EE trajectory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    n = demo.frame_count
    for v in demo.views:
        if not n:
            break
        frames = sorted({0, n - 1})
        fig, axes = plt.subplots(2, len(frames), figsize=(4 * len(frames), 6), squeeze=False)
        for c, t in enumerate(frames):
            im = axes[0, c].imshow(v.depths[t].values, cmap="viridis")
            axes[0, c].set_title(f"{v.view_id} depth, frame {t}")
            fig.colorbar(im, ax=axes[0, c], fraction=0.046, label="m")
            axes[1, c].imshow(v.masks[t], cmap="tab20", interpolation="nearest")
            axes[1, c].set_title(f"{v.view_id} labels, frame {t}")
        for ax in axes.flat:
            ax.set_axis_off()
        fig.tight_layout()
        path = out / f"view_{v.view_id}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    if n and demo.actions:
        fig, (ax_xy, ax_z) = plt.subplots(1, 2, figsize=(9, 4))
        for arm, seq in sorted(demo.actions.items()):
            p = np.array([a.pose.translation for a in seq])
            ax_xy.plot(p[:, 0], p[:, 1], label=arm or "arm")
            ax_z.plot(np.arange(n), p[:, 2], label=arm or "arm")
        ax_xy.set_xlabel("x (m)")
        ax_xy.set_ylabel("y (m)")
        ax_xy.set_aspect("equal", adjustable="datalim")
        ax_z.set_xlabel("frame")
        ax_z.set_ylabel("z (m)")
        ax_xy.legend()
        fig.tight_layout()
        path = out / "trajectory.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written
