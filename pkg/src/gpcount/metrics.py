"""Counting metrics, gain summaries, and delimited report files.

MAE is the mean absolute count error; MSE here is the root of the mean
squared count error (the field's customary definition for counting).  The
average gain of a method over a baseline is the mean of the two relative
improvements, reported as a positive percentage when the method is better.
All delimited output uses 6 significant digits and a stable column order,
so identical inputs produce identical bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import AnnotatedImage
from .errors import ConfigError, ContractError, ShapeError
from .model import ModelParams, predict_values

METRICS_HEADER = "run_id,labeled_fraction,method,mae,mse,ag,seed"
HIST_HEADER = "bin_lo,bin_hi,pred_count,pseudo_count"
PER_IMAGE_HEADER = "id,gt_count,pred_count"


@dataclass(frozen=True)
class PerImageResult:
    id: str
    gt_count: float
    pred_count: float


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    n_images: int
    per_image: tuple[PerImageResult, ...] = ()


@dataclass(frozen=True)
class PseudoErrorRecord:
    """Normalized count errors of a prediction and its pseudo target."""
    id: str
    err_pred: float
    err_pseudo: float
    gt_count: float


def mae_mse(pairs) -> tuple[float, float]:
    """(mean absolute error, root-mean-square error) over (gt, pred) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("mae_mse: no pairs given")
    diffs = np.array([float(gt) - float(pred) for gt, pred in pairs])
    mae = float(np.mean(np.abs(diffs)))
    mse = float(np.sqrt(np.mean(diffs * diffs)))
    return mae, mse


def average_gain(baseline: tuple[float, float],
                 method: tuple[float, float]) -> float:
    """Mean relative improvement of a method over a baseline, in percent.

    Both arguments are (mae, mse) pairs.  Positive when the method is
    better on average; requires positive baseline errors.
    """
    baseline_mae, baseline_mse = float(baseline[0]), float(baseline[1])
    method_mae, method_mse = float(method[0]), float(method[1])
    if baseline_mae <= 0.0 or baseline_mse <= 0.0:
        raise ContractError("average_gain: baseline errors must be positive")
    g_mae = (baseline_mae - method_mae) / baseline_mae
    g_mse = (baseline_mse - method_mse) / baseline_mse
    return 100.0 * 0.5 * (g_mae + g_mse)


def format_gain(percent: float) -> str:
    """Two-significant-digit display form used in summary tables."""
    return f"{percent:.2g}"


def evaluate(params: ModelParams, images: list[AnnotatedImage],
             batch_size: int = 16) -> MetricsReport:
    """Predict counts for ``images`` and summarize the count errors."""
    if not images:
        raise ShapeError("evaluate: no images given")
    rows = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        preds = predict_values(np.stack([im.pixels for im in chunk]), params)
        counts = preds.sum(axis=(1, 2, 3))
        for im, pred_count in zip(chunk, counts):
            rows.append(PerImageResult(im.id, float(im.gt_count),
                                       float(pred_count)))
    mae, mse = mae_mse((r.gt_count, r.pred_count) for r in rows)
    return MetricsReport(mae=mae, mse=mse, n_images=len(rows),
                         per_image=tuple(rows))


def pseudo_error_records(samples) -> tuple[list[PseudoErrorRecord], int]:
    """Build records from (id, gt_count, pred_count, pseudo_count) tuples.

    Samples with a non-positive ground-truth count cannot be normalized and
    are excluded; the second return value counts them.
    """
    records, excluded = [], 0
    for sample_id, gt, pred, pseudo in samples:
        gt = float(gt)
        if gt <= 0.0:
            excluded += 1
            continue
        records.append(PseudoErrorRecord(
            id=str(sample_id),
            err_pred=abs(float(pred) - gt) / gt,
            err_pseudo=abs(float(pseudo) - gt) / gt,
            gt_count=gt,
        ))
    return records, excluded


def pseudo_error_histogram(records: list[PseudoErrorRecord],
                           bins: int = 10):
    """Histogram prediction and pseudo-target errors on shared bins.

    Bins are equal-width over the pooled range of both error kinds; the
    rightmost edge is inclusive.  Returns (edges [bins+1], pred_counts,
    pseudo_counts).
    """
    if bins < 1:
        raise ConfigError(f"pseudo_error_histogram: bins must be >= 1, got {bins}")
    if not records:
        raise ShapeError("pseudo_error_histogram: no records")
    pred = np.array([r.err_pred for r in records])
    pseudo = np.array([r.err_pseudo for r in records])
    lo = float(min(pred.min(), pseudo.min()))
    hi = float(max(pred.max(), pseudo.max()))
    if hi == lo:
        hi = lo + 1.0          # degenerate range: everything in the first bin
    edges = np.linspace(lo, hi, bins + 1)
    pred_counts, _ = np.histogram(pred, bins=edges)
    pseudo_counts, _ = np.histogram(pseudo, bins=edges)
    return edges, pred_counts, pseudo_counts


# ---------------------------------------------------------------------------
# delimited output
# ---------------------------------------------------------------------------

def format_number(x) -> str:
    """6-significant-digit rendering shared by all report files."""
    value = float(x)
    if value == 0.0:
        value = 0.0            # normalize negative zero
    return f"{value:.6g}"


def write_text_atomic(path, text: str):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    labeled_fraction: float
    method: str
    mae: float
    mse: float
    ag: float | None       # None renders as an empty field
    seed: int | str


def render_metrics_csv(rows: list[MetricsRow]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        ag = "" if r.ag is None else format_number(r.ag)
        lines.append(",".join([
            r.run_id,
            format_number(r.labeled_fraction),
            r.method,
            format_number(r.mae),
            format_number(r.mse),
            ag,
            str(r.seed),
        ]))
    return "\n".join(lines) + "\n"


def render_per_image_csv(report: MetricsReport) -> str:
    lines = [PER_IMAGE_HEADER]
    for r in report.per_image:
        lines.append(f"{r.id},{format_number(r.gt_count)},"
                     f"{format_number(r.pred_count)}")
    return "\n".join(lines) + "\n"


def render_pseudo_hist_csv(edges, pred_counts, pseudo_counts) -> str:
    lines = [HIST_HEADER]
    for i in range(len(pred_counts)):
        lines.append(",".join([
            format_number(edges[i]),
            format_number(edges[i + 1]),
            str(int(pred_counts[i])),
            str(int(pseudo_counts[i])),
        ]))
    return "\n".join(lines) + "\n"
