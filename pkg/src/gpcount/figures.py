"""Figure rendering for run reports.

Every function draws one PNG from already-aggregated data (metric rows,
histogram counts, history rows) and writes it atomically.  Rendering uses
the object-oriented matplotlib API with an explicit Agg canvas, so no
global pyplot state is touched, and the PNG metadata is pinned so a rerun
writes byte-identical files.
"""

from __future__ import annotations

import os
import tempfile

from matplotlib.figure import Figure

from .errors import ConfigError
from .metrics import MetricsRow, PerImageResult

# Fixed metadata keeps the PNG encoder from stamping a library version,
# so identical data renders to identical bytes.
_PNG_METADATA = {"Software": "gpcount"}

_METHOD_COLORS = {"baseline": "#777777", "gp": "#1f77b4", "ranking": "#d62728"}
_METHOD_ORDER = {"baseline": 0, "gp": 1, "ranking": 2}


def _save(fig: Figure, path: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            fig.savefig(f, format="png", metadata=_PNG_METADATA)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _new_figure(xlabel: str, ylabel: str, title: str):
    fig = Figure(figsize=(5.0, 3.4), dpi=120, layout="constrained")
    ax = fig.add_subplot()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _mean_series(rows: list[MetricsRow], x_of) -> dict[str, list]:
    """Collect (x, mae) points per method from the "mean" rows."""
    series: dict[str, list] = {}
    for row in rows:
        if row.seed != "mean":
            continue
        x = x_of(row)
        if x is None:
            continue
        series.setdefault(row.method, []).append((float(x), row.mae))
    if not series:
        raise ConfigError("no mean rows to plot")
    for points in series.values():
        points.sort()
    return dict(sorted(series.items(),
                       key=lambda kv: _METHOD_ORDER.get(kv[0], 99)))


def _plot_series(ax, series: dict[str, list]):
    for method, points in series.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, marker="o", label=method,
                color=_METHOD_COLORS.get(method))
    ax.legend()


def save_fraction_curve(rows: list[MetricsRow], path: str):
    """Mean MAE against labeled fraction, one line per method."""
    fig, ax = _new_figure("labeled fraction", "mean MAE",
                          "Error vs. labeled fraction")
    _plot_series(ax, _mean_series(rows, lambda r: r.labeled_fraction))
    _save(fig, path)


def sweep_value_of(run_id: str, axis: str):
    """Recover the grid value a sweep encoded into a run id, or None."""
    prefix = axis + "-"
    if not run_id.startswith(prefix):
        return None
    body = run_id[len(prefix):]
    value, _, method = body.rpartition("-")
    if not value or not method:
        return None
    try:
        return float(value)
    except ValueError:
        return None


def save_sweep_curve(rows: list[MetricsRow], axis: str, path: str):
    """Mean MAE against a swept knob, recovered from the run ids."""
    fig, ax = _new_figure(axis, "mean MAE", f"Error vs. {axis}")
    _plot_series(ax, _mean_series(rows, lambda r: sweep_value_of(r.run_id,
                                                                 axis)))
    _save(fig, path)


def save_pseudo_histogram(edges, pred_counts, pseudo_counts, path: str):
    """Paired histogram of normalized prediction and pseudo-target errors."""
    if len(edges) < 2 or len(pred_counts) != len(edges) - 1 \
            or len(pseudo_counts) != len(edges) - 1:
        raise ConfigError("histogram arrays are inconsistent")
    fig, ax = _new_figure("normalized count error", "images",
                          "Prediction vs. pseudo-target errors")
    width = (edges[1] - edges[0]) * 0.42
    centers = [(lo + hi) / 2.0 for lo, hi in zip(edges[:-1], edges[1:])]
    ax.bar([c - width / 2 for c in centers], pred_counts, width=width,
           label="prediction", color="#1f77b4")
    ax.bar([c + width / 2 for c in centers], pseudo_counts, width=width,
           label="pseudo target", color="#ff7f0e")
    ax.legend()
    _save(fig, path)


def save_history_curves(history: list[dict], path: str):
    """Per-epoch loss terms of one training run."""
    if not history:
        raise ConfigError("history is empty")
    fig, ax = _new_figure("epoch", "loss", "Training losses")
    epochs = [row["epoch"] for row in history]
    for key, color in (("supervised", "#1f77b4"),
                       ("unsupervised", "#ff7f0e"),
                       ("ranking", "#d62728")):
        if any(key in row for row in history):
            ax.plot(epochs, [row.get(key) for row in history],
                    marker=".", label=key, color=color)
    if any("mean_variance" in row for row in history):
        twin = ax.twinx()
        twin.plot(epochs, [row.get("mean_variance") for row in history],
                  linestyle="--", color="#2ca02c", label="mean variance")
        twin.set_ylabel("predictive variance")
        twin.legend(loc="upper right")
    ax.set_yscale("log")
    ax.legend(loc="upper left")
    _save(fig, path)


def save_count_scatter(per_image: list[PerImageResult], path: str):
    """Predicted against true counts, with the identity for reference."""
    if not per_image:
        raise ConfigError("no per-image results to plot")
    fig, ax = _new_figure("true count", "predicted count",
                          "Predicted vs. true counts")
    gt = [r.gt_count for r in per_image]
    pred = [r.pred_count for r in per_image]
    lo, hi = min(gt + pred + [0.0]), max(gt + pred)
    ax.plot([lo, hi], [lo, hi], color="#999999", linewidth=1.0)
    ax.scatter(gt, pred, s=14, alpha=0.7, color="#1f77b4")
    _save(fig, path)
