"""Matplotlib figures written next to the delimited reports."""

from __future__ import annotations

from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no date stamp so repeated runs write identical files
matplotlib.rcParams["svg.hashsalt"] = "behaveformer"
_METADATA = {"Date": None}

_TICKS = [0.001, 0.01, 0.05, 0.2, 0.5, 0.8, 0.95]


def _probit(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-3, 1 - 1e-3)
    inv = NormalDist().inv_cdf
    return np.array([inv(v) for v in p.ravel()]).reshape(p.shape)


def plot_det(curves: Sequence[tuple[str, "DetCurve"]], path: str | Path, title: str = "DET") -> Path:
    """DET plot on normal-deviate axes; the legend carries each curve's EER."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, curve in curves:
        ax.plot(_probit(curve.far), _probit(curve.frr), label=f"{label} (EER {100 * curve.eer:.2f}%)")
    lim = _probit([0.001, 0.95])
    ax.plot(lim, lim, color="0.7", lw=0.8, ls="--")
    ax.set_xticks(_probit(_TICKS))
    ax.set_xticklabels([f"{100 * t:g}" for t in _TICKS])
    ax.set_yticks(_probit(_TICKS))
    ax.set_yticklabels([f"{100 * t:g}" for t in _TICKS])
    ax.set_xlim(*lim)
    ax.set_ylim(*lim)
    ax.set_xlabel("False accept rate (%)")
    ax.set_ylabel("False reject rate (%)")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata=_METADATA)
    plt.close(fig)
    return path


def plot_history(rows: Sequence[tuple[int, float, float]], path: str | Path) -> Path:
    epochs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r[1] for r in rows], color="C0", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("triplet loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [100 * r[2] for r in rows], color="C1", label="val EER")
    ax2.set_ylabel("validation EER (%)")
    fig.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata=_METADATA)
    plt.close(fig)
    return path
