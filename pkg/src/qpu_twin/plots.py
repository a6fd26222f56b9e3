"""Deterministic SVG figures with the plotted data embedded as comments.

Every writer funnels through save_svg, which pins the matplotlib hash
salt, strips the creation date unless a stamp is requested, and injects
the raw arrays as a JSON comment so a figure can be regenerated from the
file alone.  Identical inputs therefore produce byte-identical files.
"""
from __future__ import annotations

import json
import os
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_HASH_SALT = "qpu-twin"


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


def save_svg(fig, path: str, data: dict | None = None,
             stamp: bool = False) -> None:
    """Render `fig` to `path` atomically.

    With stamp=False (the default) the SVG carries no creation date, so
    reruns with identical inputs are byte-identical.  `data` is embedded
    after the XML prologue as a comment holding sorted-keys JSON.
    """
    plt.rcParams["svg.hashsalt"] = _HASH_SALT
    metadata = {} if stamp else {"Date": None}
    tmp = tempfile.NamedTemporaryFile(
        mode="w", encoding="utf-8", newline="\n", delete=False,
        dir=os.path.dirname(os.path.abspath(path)), suffix=".svg")
    try:
        fig.savefig(tmp, format="svg", metadata=metadata)
        tmp.close()
        if data is not None:
            with open(tmp.name, encoding="utf-8") as fh:
                text = fh.read()
            blob = json.dumps(_jsonable(data), sort_keys=True)
            blob = blob.replace("--", "- -")  # keep the XML comment legal
            head, sep, tail = text.partition("<svg")
            text = head + "<!-- data: " + blob + " -->\n" + sep + tail
            with open(tmp.name, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        os.replace(tmp.name, path)
    finally:
        if os.path.exists(tmp.name):
            os.unlink(tmp.name)
    plt.close(fig)


def line_figure(x, curves: dict, xlabel: str, ylabel: str,
                title: str = "", band: tuple | None = None,
                logy: bool = False):
    """One axis, one line per labeled curve; optional shaded y-band."""
    fig, ax = plt.subplots(figsize=(5.4, 3.6), constrained_layout=True)
    for label in sorted(curves):
        ax.plot(np.asarray(x), np.asarray(curves[label]), label=label)
    if band is not None:
        ax.axhspan(band[0], band[1], alpha=0.15, color="gray")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend(frameon=False, fontsize=8)
    return fig


def scatter_figure(clouds: dict, xlabel: str, ylabel: str,
                   title: str = ""):
    """One scatter cloud per label (complex samples as I/Q)."""
    fig, ax = plt.subplots(figsize=(4.2, 4.0), constrained_layout=True)
    for label in sorted(clouds):
        z = np.asarray(clouds[label])
        ax.plot(z.real, z.imag, ".", markersize=2, alpha=0.5, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8, markerscale=4)
    return fig


def heatmap_figure(x, y, z, xlabel: str, ylabel: str, zlabel: str,
                   title: str = "", annotate: bool = False):
    """pcolormesh of z[y, x]; annotate=True prints each cell value."""
    fig, ax = plt.subplots(figsize=(5.2, 4.0), constrained_layout=True)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    mesh = ax.pcolormesh(x, y, z, shading="nearest")
    fig.colorbar(mesh, ax=ax, label=zlabel)
    if annotate:
        for i, yv in enumerate(y):
            for j, xv in enumerate(x):
                ax.text(xv, yv, "%.3g" % z[i, j], ha="center",
                        va="center", fontsize=7,
                        color="white" if z[i, j] < 0.5 * z.max() else "black")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    return fig


def decay_figure(lengths, survivals: dict, fits: dict | None,
                 ylabel: str = "ground population", title: str = ""):
    """RB-style decay points with optional fitted curves overlaid."""
    fig, ax = plt.subplots(figsize=(5.4, 3.6), constrained_layout=True)
    lengths = np.asarray(lengths, dtype=float)
    for label in sorted(survivals):
        pts = ax.plot(lengths, np.asarray(survivals[label]), "o",
                      markersize=4, label=label)[0]
        if fits and label in fits:
            a, p, b = fits[label]
            grid = np.linspace(lengths.min(), lengths.max(), 200)
            ax.plot(grid, a * p ** grid + b, "-", color=pts.get_color(),
                    alpha=0.7)
    ax.set_xlabel("sequence length")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    return fig
