"""Command-line entry points: generate, train, sweep, transfer, report.

Every command writes its artifacts under ``--out``.  Data files (delimited
tables, checkpoints, figures) are written atomically and contain no
timestamps, so a rerun with identical flags reproduces them byte for byte;
wall-clock annotations go to ``run.log`` only.  Configuration resolves in
precedence order: command-line flags over ``GPCOUNT_*`` environment
variables over ``--config`` file over built-in defaults.  On failure the
process prints a single ``error: ...`` line to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import os
import sys

from .data import DomainStyle, save_dataset
from .errors import GpcountError, ParseError
from .experiments import DatasetSpec, ExperimentSpec, SWEEP_AXES, \
    TRANSFER_TARGET_STYLE, TransferSpec, run_experiment, run_sweep, \
    run_transfer
from .figures import save_count_scatter, save_fraction_curve, \
    save_history_curves, save_pseudo_histogram, save_sweep_curve, \
    sweep_value_of
from .metrics import HIST_HEADER, METRICS_HEADER, PER_IMAGE_HEADER, \
    MetricsRow, PerImageResult, format_number, pseudo_error_histogram, \
    render_metrics_csv, render_per_image_csv, render_pseudo_hist_csv, \
    write_text_atomic
from .model import save_checkpoint
from .training import TrainConfig, apply_env_overrides, load_config_file

HISTORY_FIELDS = ("epoch", "supervised", "unsupervised", "ranking",
                  "mean_variance", "min_variance", "max_variance", "skipped")
HISTORY_HEADER = ",".join(HISTORY_FIELDS)

# Training knobs that get first-class flags; everything else in TrainConfig
# is reachable through --config files and GPCOUNT_* variables.
_TRAIN_FLAG_FIELDS = ("epochs", "batch_size", "lambda_un", "n_neighbors",
                      "learning_rate", "seed")


class RunLog:
    """Append-only log file; the single place timestamps may appear."""

    def __init__(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        self._file = open(os.path.join(directory, "run.log"), "w")

    def note(self, message: str):
        stamp = datetime.datetime.now().isoformat(timespec="seconds")
        self._file.write(f"{stamp} {message}\n")
        self._file.flush()

    def close(self):
        self._file.close()


# ---------------------------------------------------------------------------
# flag parsing helpers
# ---------------------------------------------------------------------------

def _parse_count_range(text: str) -> tuple[int, int]:
    lo_text, sep, hi_text = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(
            f"expected MIN:MAX, got {text!r}")
    try:
        lo, hi = int(lo_text), int(hi_text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected integer MIN:MAX, got {text!r}") from None
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(
            f"count range minimum must be <= maximum, got {text!r}")
    return lo, hi


def _parse_size(text: str) -> tuple[int, int]:
    body = text.lower()
    try:
        if "x" in body:
            h_text, w_text = body.split("x", 1)
            return int(h_text), int(w_text)
        side = int(body)
        return side, side
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected SIZE or HxW, got {text!r}") from None


def _parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}") from None


def _parse_method_list(text: str) -> tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())


def _add_dataset_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", metavar="DIR",
                        help="load training images from a generated dataset "
                             "directory instead of synthesizing them")
    parser.add_argument("--n-train", type=int, default=200,
                        help="training images to synthesize (default 200)")
    parser.add_argument("--n-test", type=int, default=50,
                        help="held-out test images (default 50)")
    parser.add_argument("--image-size", type=_parse_size, default=(64, 64),
                        metavar="SIZE", help="image size, SIZE or HxW "
                        "(default 64)")
    parser.add_argument("--count", type=_parse_count_range, default=(5, 50),
                        metavar="MIN:MAX",
                        help="inclusive dot-count range (default 5:50)")
    parser.add_argument("--data-seed", type=int, default=1,
                        help="dataset generation seed (default 1)")


def _add_train_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="FILE",
                        help="key=value training configuration file")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lambda-un", type=float,
                        help="unsupervised loss weight")
    parser.add_argument("--n-neighbors", type=int,
                        help="bank neighbors per posterior query")
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--seed", type=int,
                        help="base seed; trial t uses seed+t")


def _dataset_spec(args, style: DomainStyle | None = None,
                  seed: int | None = None) -> DatasetSpec:
    return DatasetSpec(
        n_train=args.n_train, n_test=args.n_test, size=args.image_size,
        count_range=args.count, style=style or DomainStyle(),
        seed=args.data_seed if seed is None else seed,
        dataset_dir=getattr(args, "dataset", None))


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    cfg = apply_env_overrides(cfg)
    overrides = {}
    for name in _TRAIN_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _write_config(cfg: TrainConfig, directory: str):
    lines = [f"{f.name}={getattr(cfg, f.name)}"
             for f in dataclasses.fields(TrainConfig)]
    write_text_atomic(os.path.join(directory, "config.txt"),
                      "\n".join(lines) + "\n")


def render_history_csv(history: list[dict]) -> str:
    lines = [HISTORY_HEADER]
    for row in history:
        cells = []
        for name in HISTORY_FIELDS:
            value = row.get(name)
            if value is None:
                cells.append("")
            elif name in ("epoch", "skipped"):
                cells.append(str(int(value)))
            else:
                cells.append(format_number(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _write_trial_artifacts(directory: str, trial):
    seed = trial.seed
    write_text_atomic(os.path.join(directory, f"per_image_seed{seed}.csv"),
                      render_per_image_csv(trial.report))
    write_text_atomic(os.path.join(directory, f"history_seed{seed}.csv"),
                      render_history_csv(trial.history))
    save_checkpoint(trial.params,
                    os.path.join(directory, f"checkpoint_seed{seed}.txt"))


def _write_pooled_pseudo_hist(directory: str, trials):
    records = [r for t in trials for r in t.pseudo_records]
    if not records:
        return
    edges, pred_counts, pseudo_counts = pseudo_error_histogram(records)
    write_text_atomic(os.path.join(directory, "pseudo_hist.csv"),
                      render_pseudo_hist_csv(edges, pred_counts,
                                             pseudo_counts))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .data import generate_dataset
    if args.n < 1:
        raise ParseError(f"--n must be >= 1, got {args.n}")
    images = generate_dataset(args.n, args.size, args.count,
                              DomainStyle(), seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(images, args.out)
    print(f"wrote {len(images)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    spec = ExperimentSpec(
        name=args.name or f"train-{args.method}", method=args.method,
        labeled_fraction=args.labeled, dataset=_dataset_spec(args),
        train=cfg, trials=args.trials)
    os.makedirs(args.out, exist_ok=True)
    log = RunLog(args.out)
    try:
        log.note(f"train start: method={spec.method} "
                 f"labeled={spec.labeled_fraction} trials={spec.trials}")
        result = run_experiment(spec, analyze_pseudo=(spec.method == "gp"))
        _write_config(cfg, args.out)
        write_text_atomic(os.path.join(args.out, "metrics.csv"),
                          render_metrics_csv(result.rows))
        for trial in result.trials:
            _write_trial_artifacts(args.out, trial)
            log.note(f"trial seed={trial.seed} done: "
                     f"mae={format_number(trial.report.mae)}")
        _write_pooled_pseudo_hist(args.out, result.trials)
        mean = result.mean_row
        log.note(f"train done: mean mae={format_number(mean.mae)}")
        print(f"{spec.name}: mean mae {format_number(mean.mae)} "
              f"mse {format_number(mean.mse)} over {spec.trials} trials")
    finally:
        log.close()
    return 0


def cmd_sweep(args) -> int:
    methods = args.methods or None
    if args.axis == "n_neighbors":
        for v in args.values:
            if v != int(v) or v < 1:
                raise ParseError(
                    f"--values for n_neighbors must be positive integers, "
                    f"got {format_number(v)}")
    os.makedirs(args.out, exist_ok=True)
    log = RunLog(args.out)
    try:
        log.note(f"sweep start: axis={args.axis} values={list(args.values)}")
        result = run_sweep(
            args.axis, args.values, methods=methods,
            dataset=_dataset_spec(args), train_config=_train_config(args),
            labeled_fraction=args.labeled, trials=args.trials)
        _write_config(result.experiments[0].spec.train, args.out)
        write_text_atomic(os.path.join(args.out, "metrics.csv"),
                          render_metrics_csv(result.rows))
        for experiment in result.experiments:
            mean = experiment.mean_row
            log.note(f"{experiment.spec.name} done: "
                     f"mean mae={format_number(mean.mae)}")
        print(f"sweep {args.axis}: {len(result.experiments)} runs, "
              f"rows in {os.path.join(args.out, 'metrics.csv')}")
    finally:
        log.close()
    return 0


def cmd_transfer(args) -> int:
    cfg = _train_config(args)
    target_style = DomainStyle(
        dot_radius=args.target_dot_radius,
        dot_intensity=args.target_dot_intensity,
        background_noise_std=args.target_noise_std,
        background_texture_scale=args.target_texture_scale,
        seed_offset=1)
    spec = TransferSpec(
        source=_dataset_spec(args),
        target=_dataset_spec(args, style=target_style,
                             seed=args.data_seed + 1),
        train=cfg, trials=args.trials)
    os.makedirs(args.out, exist_ok=True)
    log = RunLog(args.out)
    try:
        log.note(f"transfer start: trials={spec.trials}")
        result = run_transfer(spec)
        _write_config(cfg, args.out)
        write_text_atomic(os.path.join(args.out, "metrics.csv"),
                          render_metrics_csv(result.rows))
        for row in result.rows:
            if row.seed == "mean":
                log.note(f"{row.run_id} mean mae={format_number(row.mae)}")
        gp_mean = next(r for r in result.rows
                       if r.seed == "mean" and r.method == "gp")
        base_mean = next(r for r in result.rows
                         if r.seed == "mean" and r.method == "baseline")
        print(f"transfer: no-adapt mae {format_number(base_mean.mae)}, "
              f"gp mae {format_number(gp_mean.mae)}")
    finally:
        log.close()
    return 0


# ---------------------------------------------------------------------------
# report: parse a run directory's tables and render figures
# ---------------------------------------------------------------------------

def _read_lines(path: str) -> list[str]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    return lines


def _split_row(path: str, line_no: int, line: str, n_fields: int) -> list[str]:
    cells = line.split(",")
    if len(cells) != n_fields:
        raise ParseError(f"{path}:{line_no}: expected {n_fields} fields, "
                         f"got {len(cells)}")
    return cells


def read_metrics_csv(path: str) -> list[MetricsRow]:
    lines = _read_lines(path)
    if lines[0] != METRICS_HEADER:
        raise ParseError(f"{path}:1: unexpected header {lines[0]!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        run_id, fraction, method, mae, mse, ag, seed = \
            _split_row(path, i, line, 7)
        try:
            rows.append(MetricsRow(
                run_id, float(fraction), method, float(mae), float(mse),
                float(ag) if ag else None,
                seed if seed == "mean" else int(seed)))
        except ValueError as exc:
            raise ParseError(f"{path}:{i}: {exc}") from None
    return rows


def read_pseudo_hist_csv(path: str):
    lines = _read_lines(path)
    if lines[0] != HIST_HEADER:
        raise ParseError(f"{path}:1: unexpected header {lines[0]!r}")
    edges, pred_counts, pseudo_counts = [], [], []
    for i, line in enumerate(lines[1:], start=2):
        lo, hi, pred, pseudo = _split_row(path, i, line, 4)
        try:
            edges.append(float(lo))
            last_hi = float(hi)
            pred_counts.append(int(pred))
            pseudo_counts.append(int(pseudo))
        except ValueError as exc:
            raise ParseError(f"{path}:{i}: {exc}") from None
    if not edges:
        raise ParseError(f"{path}:2: histogram has no bins")
    edges.append(last_hi)
    return edges, pred_counts, pseudo_counts


def read_per_image_csv(path: str) -> list[PerImageResult]:
    lines = _read_lines(path)
    if lines[0] != PER_IMAGE_HEADER:
        raise ParseError(f"{path}:1: unexpected header {lines[0]!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        image_id, gt, pred = _split_row(path, i, line, 3)
        try:
            rows.append(PerImageResult(image_id, float(gt), float(pred)))
        except ValueError as exc:
            raise ParseError(f"{path}:{i}: {exc}") from None
    return rows


def read_history_csv(path: str) -> list[dict]:
    lines = _read_lines(path)
    if lines[0] != HISTORY_HEADER:
        raise ParseError(f"{path}:1: unexpected header {lines[0]!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        cells = _split_row(path, i, line, len(HISTORY_FIELDS))
        row = {}
        for name, cell in zip(HISTORY_FIELDS, cells):
            if cell == "":
                continue
            try:
                row[name] = int(cell) if name in ("epoch", "skipped") \
                    else float(cell)
            except ValueError as exc:
                raise ParseError(f"{path}:{i}: {exc}") from None
        rows.append(row)
    return rows


def _detect_sweep_axis(rows: list[MetricsRow]) -> str | None:
    for axis in ("lambda_un", "n_neighbors"):
        if all(sweep_value_of(r.run_id, axis) is not None for r in rows):
            return axis
    return None


def cmd_report(args) -> int:
    run_dir = args.run
    out_dir = args.out or run_dir
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise ParseError(f"{metrics_path}: no such file")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    rows = read_metrics_csv(metrics_path)
    axis = _detect_sweep_axis(rows)
    if axis is not None:
        path = os.path.join(out_dir, f"mae_vs_{axis}.png")
        save_sweep_curve(rows, axis, path)
    else:
        path = os.path.join(out_dir, "mae_vs_fraction.png")
        save_fraction_curve(rows, path)
    written.append(path)

    hist_path = os.path.join(run_dir, "pseudo_hist.csv")
    if os.path.exists(hist_path):
        path = os.path.join(out_dir, "pseudo_errors.png")
        save_pseudo_histogram(*read_pseudo_hist_csv(hist_path), path)
        written.append(path)

    for name in sorted(os.listdir(run_dir)):
        stem, ext = os.path.splitext(name)
        if ext != ".csv":
            continue
        if stem.startswith("per_image_"):
            path = os.path.join(out_dir, f"counts_{stem[len('per_image_'):]}.png")
            save_count_scatter(read_per_image_csv(
                os.path.join(run_dir, name)), path)
            written.append(path)
        elif stem.startswith("history_"):
            path = os.path.join(out_dir, f"losses_{stem[len('history_'):]}.png")
            save_history_curves(read_history_csv(
                os.path.join(run_dir, name)), path)
            written.append(path)

    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpcount",
        description="Semi-supervised density-map counting experiments on "
                    "synthetic dot images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset directory")
    p.add_argument("--n", type=int, required=True,
                   help="number of images")
    p.add_argument("--size", type=_parse_size, default=(64, 64),
                   metavar="SIZE", help="image size, SIZE or HxW (default 64)")
    p.add_argument("--count", type=_parse_count_range, default=(5, 50),
                   metavar="MIN:MAX",
                   help="inclusive dot-count range (default 5:50)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method over seeded trials")
    p.add_argument("--method", required=True,
                   choices=("baseline", "gp", "ranking"))
    p.add_argument("--labeled", type=float, default=0.05,
                   help="labeled fraction of the training pool "
                        "(default 0.05)")
    p.add_argument("--trials", type=int, default=5,
                   help="seeded trials to average (default 5)")
    p.add_argument("--name", help="run id for the metric rows")
    p.add_argument("--out", required=True, help="run directory")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid one knob and merge the rows")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", type=_parse_float_list, required=True,
                   metavar="V1,V2,...", help="grid values")
    p.add_argument("--methods", type=_parse_method_list,
                   metavar="M1,M2,...",
                   help="methods to run per grid value (default: "
                        "baseline,gp for labeled_fraction; gp otherwise)")
    p.add_argument("--labeled", type=float, default=0.05,
                   help="labeled fraction for knob sweeps (default 0.05)")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--out", required=True, help="run directory")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("transfer",
                       help="labeled source domain, unlabeled target domain")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--target-dot-radius", type=float,
                   default=TRANSFER_TARGET_STYLE.dot_radius)
    p.add_argument("--target-dot-intensity", type=float,
                   default=TRANSFER_TARGET_STYLE.dot_intensity)
    p.add_argument("--target-noise-std", type=float,
                   default=TRANSFER_TARGET_STYLE.background_noise_std)
    p.add_argument("--target-texture-scale", type=float,
                   default=TRANSFER_TARGET_STYLE.background_texture_scale)
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("report", help="render figures for a run directory")
    p.add_argument("--run", required=True, help="run directory to read")
    p.add_argument("--out", help="figure directory (default: the run dir)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GpcountError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
