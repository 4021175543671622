"""Figure rendering for the report path.

When a run exports the time-indexed component means as CSV, the same data
can be rendered to a PNG next to it.  Rendering is file-only (Agg backend);
nothing interactive.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_mean_paths(times, means: dict, out_path) -> str:
    """means: column name -> 1-d array over grid nodes (Y/M) or steps (Z/psi).

    Draws the solution components in the top panel and the integrand means
    in the bottom one; returns the written path.
    """
    top = {k: v for k, v in means.items() if k.startswith(("Y", "M"))}
    bottom = {k: v for k, v in means.items() if not k.startswith(("Y", "M"))}
    nrows = 2 if bottom else 1
    fig, axes = plt.subplots(nrows, 1, figsize=(7.0, 3.0 * nrows), sharex=True)
    axes = np.atleast_1d(axes)
    for name, vals in sorted(top.items()):
        axes[0].plot(times[: len(vals)], vals, label=name)
    axes[0].set_ylabel("component mean")
    axes[0].legend(loc="best", fontsize=8)
    axes[0].grid(alpha=0.3)
    if bottom:
        for name, vals in sorted(bottom.items()):
            axes[1].step(times[: len(vals)], vals, where="post", label=name)
        axes[1].set_ylabel("integrand mean")
        axes[1].legend(loc="best", fontsize=8)
        axes[1].grid(alpha=0.3)
    axes[-1].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return str(out_path)
