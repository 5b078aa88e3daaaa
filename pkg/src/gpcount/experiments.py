"""Experiment orchestration: datasets, trial runs, sweeps, and transfer.

A trial trains one model on one labeled/unlabeled split and evaluates it;
an experiment averages a method over several seeded trials; a sweep grids
one knob and merges the rows.  Everything here is pure computation over
in-memory datasets — writing run directories is the command layer's job.

Protocol notes that apply to every experiment in this module:

* Trial t uses seed base+t for both the model/training randomness and the
  labeled/unlabeled split, so reruns are bit-reproducible.
* The semi-supervised arms (``gp``, ``ranking``) train with joint batches:
  each optimizer step descends supervised + lambda_un * unsupervised on one
  labeled and one unlabeled batch together.  With separate per-stage steps
  an adaptive optimizer renormalizes each loss by its own gradient scale,
  which silently discards the mixture weight; the joint step is what makes
  lambda_un a real trade-off, and the lambda sweep meaningful.
* Labeled-fraction sweeps are scored on the held-out test set.  Sweeps of
  training knobs (lambda_un, n_neighbors) are scored on a validation carve
  taken from the training pool before splitting, so knob selection never
  touches the test set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import AnnotatedImage, DomainStyle, SplitConfig, generate_dataset, \
    load_dataset, split_dataset
from .errors import ConfigError
from .gp import posterior, rebuild_bank
from .metrics import MetricsReport, MetricsRow, PseudoErrorRecord, \
    average_gain, evaluate, format_number, pseudo_error_records
from .model import ModelParams, encode_values, predict_values
from .training import TrainConfig, train

METHODS = ("baseline", "gp", "ranking")
SWEEP_AXES = ("labeled_fraction", "lambda_un", "n_neighbors")

# The held-out test set reuses the dataset seed at a fixed offset, so one
# seed fully determines a train/test pair that never overlaps.
TEST_SEED_OFFSET = 10000

# Knob sweeps score on this fraction of the training pool, carved off by a
# dedicated seeded shuffle before the labeled/unlabeled split.
VALIDATION_FRACTION = 0.1
_VALIDATION_STREAM = 9


@dataclass(frozen=True)
class DatasetSpec:
    """One train/test dataset pair, fully determined by its fields."""
    n_train: int = 200
    n_test: int = 50
    size: tuple[int, int] = (64, 64)
    count_range: tuple[int, int] = (5, 50)
    style: DomainStyle = DomainStyle()
    seed: int = 1
    dataset_dir: str | None = None   # load the training images instead

    def __post_init__(self):
        if self.n_train < 1:
            raise ConfigError(f"n_train must be >= 1, got {self.n_train}")
        if self.n_test < 1:
            raise ConfigError(f"n_test must be >= 1, got {self.n_test}")

    def build(self) -> tuple[list[AnnotatedImage], list[AnnotatedImage]]:
        """Materialize (train_images, test_images).

        With ``dataset_dir`` set the training images come from disk; the
        test set is always generated from the spec so a stored dataset can
        be evaluated against fresh draws of the same distribution.
        """
        if self.dataset_dir is not None:
            train_images = load_dataset(self.dataset_dir)
        else:
            train_images = generate_dataset(
                self.n_train, self.size, self.count_range, self.style,
                seed=self.seed)
        test_images = generate_dataset(
            self.n_test, self.size, self.count_range, self.style,
            seed=self.seed + TEST_SEED_OFFSET, id_prefix="te")
        return train_images, test_images


@dataclass(frozen=True)
class ExperimentSpec:
    """One method evaluated over seeded trials on one dataset and split."""
    name: str
    method: str
    labeled_fraction: float = 0.05
    dataset: DatasetSpec = DatasetSpec()
    train: TrainConfig = TrainConfig()
    trials: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"method must be one of {'/'.join(METHODS)}, got "
                f"{self.method!r}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(
                f"labeled_fraction must be in (0, 1], got "
                f"{self.labeled_fraction}")

    def trial_config(self, trial: int) -> TrainConfig:
        """Training configuration for trial index ``trial`` (0-based)."""
        seed = self.train.seed + trial
        if self.method == "gp":
            return replace(self.train, seed=seed, gp_enabled=True,
                           ranking_enabled=False, interleave_batches=True)
        if self.method == "ranking":
            return replace(self.train, seed=seed, gp_enabled=False,
                           ranking_enabled=True, interleave_batches=True)
        return replace(self.train, seed=seed, gp_enabled=False,
                       ranking_enabled=False, interleave_batches=False)


@dataclass
class TrialResult:
    """Everything one trial produced."""
    seed: int
    config: TrainConfig
    params: ModelParams
    history: list[dict]
    report: MetricsReport
    n_labeled: int
    n_unlabeled: int
    pseudo_records: list[PseudoErrorRecord] = field(default_factory=list)
    pseudo_excluded: int = 0


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    trials: list[TrialResult]
    rows: list[MetricsRow]        # one row per trial plus a "mean" row

    @property
    def mean_row(self) -> MetricsRow:
        return self.rows[-1]


def pseudo_error_analysis(params: ModelParams,
                          labeled: list[AnnotatedImage],
                          unlabeled: list[AnnotatedImage],
                          cfg: TrainConfig,
                          batch_size: int = 16):
    """Compare pseudo-target counts against predictions on unlabeled images.

    Rebuilds the latent bank with the final parameters, queries the
    posterior for every unlabeled image, and returns
    (records, excluded_count) where each record holds the normalized
    prediction and pseudo-target count errors.
    """
    bank = rebuild_bank(labeled, params, gt_sigma=cfg.gt_sigma)
    gp_cfg = cfg.gp_config()
    samples = []
    for start in range(0, len(unlabeled), batch_size):
        chunk = unlabeled[start:start + batch_size]
        pixels = np.stack([img.pixels for img in chunk])
        latents = encode_values(pixels, params)
        preds = predict_values(pixels, params).sum(axis=(1, 2, 3))
        for img, z, pred in zip(chunk, latents, preds):
            post = posterior(z, bank, gp_cfg)
            samples.append((img.id, img.gt_count, float(pred),
                            float(post.mean.sum())))
    return pseudo_error_records(samples)


def run_trial(spec: ExperimentSpec, trial: int,
              train_images: list[AnnotatedImage],
              eval_images: list[AnnotatedImage],
              analyze_pseudo: bool = False) -> TrialResult:
    """Train and evaluate one seeded trial of ``spec``."""
    cfg = spec.trial_config(trial)
    labeled, unlabeled = split_dataset(
        train_images, SplitConfig(spec.labeled_fraction, seed=cfg.seed))
    params, history = train(labeled, unlabeled, cfg)
    report = evaluate(params, eval_images)
    result = TrialResult(seed=cfg.seed, config=cfg, params=params,
                         history=history, report=report,
                         n_labeled=len(labeled), n_unlabeled=len(unlabeled))
    if analyze_pseudo and spec.method == "gp" and unlabeled:
        result.pseudo_records, result.pseudo_excluded = pseudo_error_analysis(
            params, labeled, unlabeled, cfg)
    return result


def run_experiment(spec: ExperimentSpec,
                   train_images: list[AnnotatedImage] | None = None,
                   eval_images: list[AnnotatedImage] | None = None,
                   analyze_pseudo: bool = False) -> ExperimentResult:
    """Run all trials of ``spec`` and aggregate the metric rows.

    Datasets are built from ``spec.dataset`` unless both image lists are
    passed in (sweeps reuse one materialized dataset across grid points).
    """
    if train_images is None or eval_images is None:
        built_train, built_eval = spec.dataset.build()
        train_images = built_train if train_images is None else train_images
        eval_images = built_eval if eval_images is None else eval_images
    trials = [run_trial(spec, t, train_images, eval_images, analyze_pseudo)
              for t in range(spec.trials)]
    rows = [MetricsRow(spec.name, spec.labeled_fraction, spec.method,
                       t.report.mae, t.report.mse, None, t.seed)
            for t in trials]
    rows.append(MetricsRow(
        spec.name, spec.labeled_fraction, spec.method,
        float(np.mean([t.report.mae for t in trials])),
        float(np.mean([t.report.mse for t in trials])),
        None, "mean"))
    return ExperimentResult(spec=spec, trials=trials, rows=rows)


def carve_validation(train_images: list[AnnotatedImage], seed: int,
                     fraction: float = VALIDATION_FRACTION):
    """Split the training pool into (remaining_train, validation).

    The carve is a seeded shuffle on its own stream, independent of every
    training and split stream, taken before any labeled/unlabeled split so
    all trials and grid points share the same validation images.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(
            f"validation fraction must be in (0, 1), got {fraction}")
    n = len(train_images)
    n_val = math.ceil(fraction * n)
    if n_val >= n:
        raise ConfigError(
            f"validation carve of {n_val} leaves no training images (n={n})")
    order = np.random.default_rng([seed, _VALIDATION_STREAM]).permutation(n)
    val_idx = sorted(order[:n_val])
    rest_idx = sorted(order[n_val:])
    return ([train_images[i] for i in rest_idx],
            [train_images[i] for i in val_idx])


def attach_mean_gains(rows: list[MetricsRow]) -> list[MetricsRow]:
    """Fill the average-gain column on non-baseline "mean" rows.

    A method's mean row gains an AG value when a baseline mean row exists
    for the same labeled fraction; per-trial rows stay empty.
    """
    baselines = {}
    for row in rows:
        if row.seed == "mean" and row.method == "baseline":
            baselines[row.labeled_fraction] = (row.mae, row.mse)
    out = []
    for row in rows:
        base = baselines.get(row.labeled_fraction)
        if (row.seed == "mean" and row.method != "baseline"
                and base is not None):
            row = replace(row, ag=average_gain(base, (row.mae, row.mse)))
        out.append(row)
    return out


@dataclass
class SweepResult:
    axis: str
    values: tuple
    rows: list[MetricsRow]
    experiments: list[ExperimentResult]


def _axis_value_config(axis: str, value, base: TrainConfig) -> TrainConfig:
    if axis == "lambda_un":
        return replace(base, lambda_un=float(value))
    if axis == "n_neighbors":
        return replace(base, n_neighbors=int(value))
    return base


def run_sweep(axis: str, values, *,
              methods: tuple[str, ...] | None = None,
              dataset: DatasetSpec = DatasetSpec(),
              train_config: TrainConfig = TrainConfig(),
              labeled_fraction: float = 0.05,
              trials: int = 5,
              analyze_pseudo: bool = False) -> SweepResult:
    """Grid one knob and merge all rows into a single table.

    ``labeled_fraction`` sweeps run baseline and GP arms per grid value and
    score on the test set.  ``lambda_un`` and ``n_neighbors`` sweeps run the
    GP arm and score on the validation carve, leaving the test set untouched
    by knob selection.  Every row's run id encodes its grid point.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(
            f"sweep axis must be one of {'/'.join(SWEEP_AXES)}, got {axis!r}")
    values = tuple(values)
    if not values:
        raise ConfigError("sweep values must be nonempty")
    train_images, test_images = dataset.build()
    if axis == "labeled_fraction":
        methods = methods or ("baseline", "gp")
        eval_images = test_images
        pool = train_images
    else:
        methods = methods or ("gp",)
        pool, eval_images = carve_validation(train_images, dataset.seed)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown sweep method {m!r}")
    rows: list[MetricsRow] = []
    experiments: list[ExperimentResult] = []
    for value in values:
        fraction = float(value) if axis == "labeled_fraction" else labeled_fraction
        cfg = _axis_value_config(axis, value, train_config)
        for method in methods:
            spec = ExperimentSpec(
                name=f"{axis}-{format_number(value)}-{method}",
                method=method, labeled_fraction=fraction, dataset=dataset,
                train=cfg, trials=trials)
            result = run_experiment(spec, pool, eval_images,
                                    analyze_pseudo=analyze_pseudo)
            experiments.append(result)
            rows.extend(result.rows)
    return SweepResult(axis=axis, values=values,
                       rows=attach_mean_gains(rows), experiments=experiments)


# Default appearance gap for the transfer experiment: the target domain has
# larger, dimmer discs on a coarser and noisier background, and its own
# generation stream.  The annotation statistics (counts, layout) match the
# source, so the gap is purely one of appearance.
TRANSFER_TARGET_STYLE = DomainStyle(
    dot_radius=2.4, dot_intensity=0.55, background_noise_std=0.10,
    background_texture_scale=12.0, seed_offset=1)


@dataclass(frozen=True)
class TransferSpec:
    """Fully labeled source domain adapting to an unlabeled target domain."""
    source: DatasetSpec = DatasetSpec()
    target: DatasetSpec = DatasetSpec(style=TRANSFER_TARGET_STYLE, seed=2)
    train: TrainConfig = TrainConfig()
    trials: int = 3

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")


@dataclass
class TransferResult:
    spec: TransferSpec
    no_adapt: list[TrialResult]
    adapted: list[TrialResult]
    rows: list[MetricsRow]


def run_transfer(spec: TransferSpec,
                 analyze_pseudo: bool = False) -> TransferResult:
    """Train on labeled source + unlabeled target; evaluate on target test.

    Two arms per trial seed: the no-adapt baseline sees only the source
    domain; the GP arm additionally consumes the target training images as
    its unlabeled set.  Both arms are scored on held-out target images the
    training never saw.
    """
    source_train, _ = spec.source.build()
    target_train, target_test = spec.target.build()
    no_adapt: list[TrialResult] = []
    adapted: list[TrialResult] = []
    rows: list[MetricsRow] = []

    def _arm(method: str, run_id: str, unlabeled, analyze: bool):
        results = []
        for t in range(spec.trials):
            seed = spec.train.seed + t
            if method == "gp":
                cfg = replace(spec.train, seed=seed, gp_enabled=True,
                              ranking_enabled=False, interleave_batches=True)
            else:
                cfg = replace(spec.train, seed=seed, gp_enabled=False,
                              ranking_enabled=False, interleave_batches=False)
            params, history = train(source_train, unlabeled, cfg)
            report = evaluate(params, target_test)
            result = TrialResult(seed=seed, config=cfg, params=params,
                                 history=history, report=report,
                                 n_labeled=len(source_train),
                                 n_unlabeled=len(unlabeled))
            if analyze and unlabeled:
                result.pseudo_records, result.pseudo_excluded = \
                    pseudo_error_analysis(params, source_train, unlabeled, cfg)
            results.append(result)
            rows.append(MetricsRow(run_id, 1.0, method, report.mae,
                                   report.mse, None, seed))
        rows.append(MetricsRow(
            run_id, 1.0, method,
            float(np.mean([r.report.mae for r in results])),
            float(np.mean([r.report.mse for r in results])),
            None, "mean"))
        return results

    no_adapt = _arm("baseline", "transfer-no-adapt", [], False)
    adapted = _arm("gp", "transfer-gp", target_train, analyze_pseudo)
    return TransferResult(spec=spec, no_adapt=no_adapt, adapted=adapted,
                          rows=attach_mean_gains(rows))
