"""SVG plots of CED and precision/recall curves (needs the ``plot`` extra)."""

from __future__ import annotations

import numpy as np

CED_XLIM = (0.0, 0.25)


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("plotting needs matplotlib: pip install 'ricpr[plot]'") from exc
    matplotlib.use("Agg")
    # fixed ids so identical data gives identical files
    matplotlib.rcParams["svg.hashsalt"] = "ricpr"
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_ced(thresholds, fractions, path, label: str = "ricpr") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(np.asarray(thresholds), np.asarray(fractions), label=label)
    ax.set_xlim(*CED_XLIM)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("NME")
    ax.set_ylabel("fraction of images")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    _save(fig, path)
    plt.close(fig)


def plot_pr(recall, precision, path, label: str = "ricpr") -> None:
    plt = _pyplot()
    r = np.asarray(recall, dtype=float)
    p = np.asarray(precision, dtype=float)
    ok = ~(np.isnan(r) | np.isnan(p))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(r[ok], p[ok], label=label)
    ax.axhline(0.8, color="grey", lw=0.8, ls="--")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    _save(fig, path)
    plt.close(fig)
