from __future__ import annotations

import io
from collections.abc import Mapping, Sequence

AVAILABLE = False

try:
    import matplotlib as mpl

    mpl.use("Agg")
    import matplotlib.pyplot as plt

    plt.style.use("dark_background")
    AVAILABLE = True
except ImportError:
    pass

type Curve = Sequence[tuple[int, float]]

if AVAILABLE:

    def plot_curves(curves: Mapping[str, Curve], title: str, ylabel: str = "validation CIDEr") -> io.BytesIO:
        """One line per run: (optimizer step, value) points, rendered to PNG bytes."""
        fig, ax = plt.subplots(figsize=(7, 4), dpi=150)
        for label, points in curves.items():
            if not points:
                continue
            steps, values = zip(*points, strict=True)
            ax.plot(steps, values, marker="o", markersize=3, linewidth=1.2, label=label)
        ax.set_title(title)
        ax.set_xlabel("optimizer step")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.25)
        if curves:
            ax.legend(fontsize=8)

        buf = io.BytesIO()
        fig.savefig(buf, format="png", bbox_inches="tight")
        plt.close(fig)
        buf.seek(0)
        return buf

else:

    def plot_curves(curves: Mapping[str, Curve], title: str, ylabel: str = "validation CIDEr") -> io.BytesIO:
        msg = "matplotlib not available"
        raise ImportError(msg)
