#!/usr/bin/env python3
"""
Visualization utilities: rendering of report plot scripts, learned
dictionaries and training curves.
"""

import csv
import os
from typing import Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")  # Headless-safe plotting
import matplotlib.pyplot as plt
import numpy as np

from logger_config import get_logger
from results_exporter import PlotSpec, parse_plot_script

logger = get_logger("visualization")


def _read_columns(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_figure(spec: PlotSpec, rows: Sequence[Dict[str, str]], output_path: str) -> None:
    """
    Draw one plot-script figure.

    Parameters
    ----------
    spec : PlotSpec
        Parsed figure block
    rows : sequence of dict
        Rows of the figure's CSV slice
    output_path : str
        Path to save the figure
    """
    for column in [spec.x, spec.y] + spec.group + ([spec.errorbar] if spec.errorbar else []):
        if rows and column not in rows[0]:
            raise ValueError(f"figure '{spec.name}': column '{column}' not in {spec.csv}")

    series: Dict[tuple, List[Dict[str, str]]] = {}
    for row in rows:
        series.setdefault(tuple(row[c] for c in spec.group), []).append(row)

    plt.figure(figsize=(6, 5))
    for key, members in sorted(series.items()):
        members = sorted(members, key=lambda r: float(r[spec.x]))
        xs = np.array([float(r[spec.x]) for r in members])
        ys = np.array([float(r[spec.y]) for r in members])
        label = ", ".join(f"{c}={v}" for c, v in zip(spec.group, key)) or None
        if spec.style == "scatter":
            plt.scatter(xs, ys, s=28, alpha=0.8, label=label)
        elif spec.errorbar:
            errs = np.array([float(r[spec.errorbar]) for r in members])
            plt.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=label)
        else:
            plt.plot(xs, ys, marker="o", label=label)

    if spec.x_log:
        plt.xscale("log")
    if spec.y_log:
        plt.yscale("log")
    plt.xlabel(spec.x)
    plt.ylabel(spec.y)
    plt.title(spec.title or spec.name)
    if len(series) > 1:
        plt.legend(fontsize=8)
    plt.grid(alpha=0.3)
    plt.tight_layout()
    plt.savefig(output_path, dpi=150)
    plt.close()


def render_plot_script(script_path: str, out_dir: Optional[str] = None) -> List[str]:
    """
    Render every figure of a plot script to PNG.

    CSV paths in the script are resolved relative to the script. Returns the
    written image paths.
    """
    base = os.path.dirname(os.path.abspath(script_path))
    out_dir = out_dir or base
    os.makedirs(out_dir, exist_ok=True)
    with open(script_path) as f:
        specs = parse_plot_script(f.read())

    written = []
    for spec in specs:
        output_path = os.path.join(out_dir, spec.output)
        plot_figure(spec, _read_columns(os.path.join(base, spec.csv)), output_path)
        written.append(output_path)
        logger.info(f"Rendered {spec.name} -> {output_path}")
    return written


def plot_dictionary(dictionary: np.ndarray, side: int, output_path: str, max_atoms: int = 64) -> None:
    """
    Tile dictionary columns as side x side images, ordered by column norm.

    Parameters
    ----------
    dictionary : np.ndarray
        (side * side, K) decoder weights
    side : int
        Patch side length
    output_path : str
        Path to save the figure
    max_atoms : int
        Largest number of columns shown
    """
    norms = np.linalg.norm(dictionary, axis=0)
    order = np.argsort(-norms)[:max_atoms]
    n_cols = int(np.ceil(np.sqrt(len(order))))
    n_rows = int(np.ceil(len(order) / n_cols))

    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.2 * n_cols, 1.2 * n_rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, idx in zip(axes.ravel(), order):
        atom = dictionary[:, idx].reshape(side, side)
        limit = max(np.max(np.abs(atom)), 1e-12)
        ax.imshow(atom, cmap="gray", vmin=-limit, vmax=limit)

    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def plot_training_curve(epochs, totals, kls, output_path: str) -> None:
    """Free energy and KL per epoch."""
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.plot(epochs, totals, label="free energy")
    ax.plot(epochs, kls, label="KL")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.set_title("Training Curve")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(output_path, dpi=150)
    plt.close(fig)
