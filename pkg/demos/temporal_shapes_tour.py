"""Render one video per TemporalShapes class and check that single frames say nothing about direction.

Writes ``temporal_shapes.png`` (one row per class, every other frame) to the
directory given as the first argument (default: current directory).

    python3 demos/temporal_shapes_tour.py /tmp
"""

from __future__ import annotations

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

from vidmask.shapes import CLASS_NAMES, REVERSAL_PAIRS, TemporalShapesSpec, generate_temporal_shapes


def main(out_dir="."):
    spec = TemporalShapesSpec()
    ds = generate_temporal_shapes(spec, 8 * 500, seed=1)
    v, y = ds.videos[..., 0], ds.labels

    fig, axes = plt.subplots(len(CLASS_NAMES), 8, figsize=(8, 8))
    for c, name in enumerate(CLASS_NAMES):
        video = v[np.flatnonzero(y == c)[0]]
        for j, t in enumerate(range(0, spec.num_frames, 2)):
            ax = axes[c, j]
            ax.imshow(video[t], vmin=-1, vmax=1, cmap="gray")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_ylabel(name, rotation=0, ha="right", fontsize=7)
    fig.tight_layout()
    out = Path(out_dir) / "temporal_shapes.png"
    fig.savefig(out, dpi=90)
    print(f"wrote {out}")

    # a single frame carries no direction: compare peak positions of each reversal pair
    for a, b in REVERSAL_PAIRS:
        for t in (0, 8, 15):
            col_a = v[y == a][:, t].max(axis=1).argmax(axis=1)
            col_b = v[y == b][:, t].max(axis=1).argmax(axis=1)
            p = stats.ks_2samp(col_a, col_b).pvalue
            print(f"{CLASS_NAMES[a]:>20s} vs {CLASS_NAMES[b]:<20s} frame {t:2d}: KS p = {p:.3f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
