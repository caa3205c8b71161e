"""Figure rendering for the report path: energy scatter, RMSD
distributions, and training loss curves, written as deterministic SVG
files alongside the delimited output."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError

# Fixed hash salt + stripped date metadata keep SVG output byte-stable
# across reruns.
matplotlib.rcParams["svg.hashsalt"] = "consistency-forge"

_SAVEFIG_KW = {"format": "svg", "metadata": {"Date": None}}


def _new_figure():
    # 6 x 6 inches at 100 dpi: fixed 600x600 viewport
    return plt.subplots(figsize=(6, 6), dpi=100)


def energy_scatter_svg(pairs: list[tuple[str, float, float]], path: Path) -> None:
    """Scatter of model energy at the generated structure vs at the
    reference equilibrium, with the diagonal reference line."""
    if not pairs:
        raise DataError("no energy pairs to plot")
    e_gen = [p[1] for p in pairs]
    e_eq = [p[2] for p in pairs]
    fig, ax = _new_figure()
    lo = min(min(e_gen), min(e_eq))
    hi = max(max(e_gen), max(e_eq))
    pad = 0.05 * max(hi - lo, 1e-6)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", lw=1, label="diagonal")
    ax.plot(e_eq, e_gen, "o", ms=4, alpha=0.7)
    ax.set_xlabel("model energy at reference equilibrium (eV)")
    ax.set_ylabel("model energy at generated structure (eV)")
    ax.set_title("energy of generated vs reference structures")
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)


def rmsd_distribution_svg(values_by_label: dict[str, list[float]], path: Path) -> None:
    """Overlaid per-molecule mean-RMSD histograms, one series per arm."""
    if not values_by_label or all(len(v) == 0 for v in values_by_label.values()):
        raise DataError("no RMSD values to plot")
    fig, ax = _new_figure()
    for label in sorted(values_by_label):
        vals = values_by_label[label]
        if vals:
            ax.hist(vals, bins=24, alpha=0.55, label=label)
    ax.set_xlabel("per-molecule mean aligned RMSD (A)")
    ax.set_ylabel("molecule count")
    ax.set_title("RMSD distribution")
    ax.legend()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)


def loss_curves_svg(metrics_csv: Path, path: Path) -> None:
    """Total and per-component loss curves from a training metrics CSV."""
    steps: list[int] = []
    series: dict[str, list[float]] = {}
    with open(metrics_csv, "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for key in ("loss_total", "loss_energy", "loss_denoise",
                        "loss_optim", "loss_score", "loss_force"):
                series.setdefault(key, []).append(float(row[key]))
    if not steps:
        raise DataError(f"empty metrics CSV: {metrics_csv}")
    fig, ax = _new_figure()
    for key, vals in series.items():
        if any(v != 0.0 for v in vals):
            ax.plot(steps, vals, lw=1, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss curves")
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
