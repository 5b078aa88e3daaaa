"""Tests for experiment orchestration: trials, sweeps, and transfer runs."""

import numpy as np
import pytest

from gpcount.data import DomainStyle, save_dataset
from gpcount.errors import ConfigError
from gpcount.experiments import DatasetSpec, ExperimentSpec, SweepResult, \
    TEST_SEED_OFFSET, TransferSpec, attach_mean_gains, carve_validation, \
    pseudo_error_analysis, run_experiment, run_sweep, run_transfer, run_trial
from gpcount.metrics import MetricsRow
from gpcount.training import TrainConfig

TINY_DS = DatasetSpec(n_train=12, n_test=4, size=(32, 32), count_range=(2, 6),
                      seed=3)
TINY_TRAIN = TrainConfig(epochs=1, batch_size=4)


def tiny_spec(method="baseline", **kwargs):
    defaults = dict(name=f"t-{method}", method=method, labeled_fraction=0.25,
                    dataset=TINY_DS, train=TINY_TRAIN, trials=1)
    defaults.update(kwargs)
    return ExperimentSpec(**defaults)


class TestDatasetSpec:
    def test_build_sizes_and_ids(self):
        train, test = TINY_DS.build()
        assert len(train) == 12 and len(test) == 4
        assert train[0].id.startswith("im")
        assert test[0].id.startswith("te")
        assert train[0].pixels.shape == (32, 32)

    def test_test_set_uses_offset_seed(self):
        train, test = TINY_DS.build()
        other_train, _ = DatasetSpec(
            n_train=12, n_test=4, size=(32, 32), count_range=(2, 6),
            seed=3 + TEST_SEED_OFFSET).build()
        # The test images are the offset seed's training draw.
        np.testing.assert_array_equal(test[0].pixels, other_train[0].pixels)

    def test_build_deterministic(self):
        a, _ = TINY_DS.build()
        b, _ = TINY_DS.build()
        np.testing.assert_array_equal(a[5].pixels, b[5].pixels)

    def test_dataset_dir_loads_training_images(self, tmp_path):
        train, _ = TINY_DS.build()
        save_dataset(train, str(tmp_path))
        spec = DatasetSpec(n_train=12, n_test=4, size=(32, 32),
                           count_range=(2, 6), seed=3,
                           dataset_dir=str(tmp_path))
        loaded_train, test = spec.build()
        assert [im.id for im in loaded_train] == [im.id for im in train]
        assert len(test) == 4

    def test_rejects_empty_sets(self):
        with pytest.raises(ConfigError):
            DatasetSpec(n_train=0)
        with pytest.raises(ConfigError):
            DatasetSpec(n_test=0)


class TestExperimentSpec:
    def test_method_validated(self):
        with pytest.raises(ConfigError):
            tiny_spec(method="boosting")

    def test_trials_validated(self):
        with pytest.raises(ConfigError):
            tiny_spec(trials=0)

    def test_fraction_validated(self):
        with pytest.raises(ConfigError):
            tiny_spec(labeled_fraction=0.0)
        with pytest.raises(ConfigError):
            tiny_spec(labeled_fraction=1.5)

    def test_trial_config_seeds_and_arms(self):
        spec = tiny_spec(method="gp", train=TrainConfig(seed=10))
        cfg0 = spec.trial_config(0)
        cfg2 = spec.trial_config(2)
        assert cfg0.seed == 10 and cfg2.seed == 12
        assert cfg0.gp_enabled and not cfg0.ranking_enabled
        assert cfg0.interleave_batches

        ranking = tiny_spec(method="ranking").trial_config(0)
        assert ranking.ranking_enabled and not ranking.gp_enabled
        assert ranking.interleave_batches

        baseline = tiny_spec(method="baseline").trial_config(0)
        assert not baseline.gp_enabled and not baseline.ranking_enabled
        assert not baseline.interleave_batches


class TestRunExperiment:
    def test_rows_per_trial_plus_mean(self):
        spec = tiny_spec(trials=2)
        result = run_experiment(spec)
        assert [r.seed for r in result.rows] == [0, 1, "mean"]
        assert result.mean_row.mae == pytest.approx(
            np.mean([t.report.mae for t in result.trials]))
        assert all(r.run_id == "t-baseline" for r in result.rows)
        assert all(r.ag is None for r in result.rows)

    def test_split_sizes_recorded(self):
        result = run_experiment(tiny_spec())
        trial = result.trials[0]
        assert trial.n_labeled == 3 and trial.n_unlabeled == 9

    def test_deterministic_rerun(self):
        spec = tiny_spec(method="gp")
        a = run_experiment(spec)
        b = run_experiment(spec)
        assert a.rows == b.rows

    def test_pseudo_records_collected_for_gp(self):
        result = run_experiment(tiny_spec(method="gp"), analyze_pseudo=True)
        trial = result.trials[0]
        assert len(trial.pseudo_records) + trial.pseudo_excluded == \
            trial.n_unlabeled
        assert all(r.err_pred >= 0 and r.err_pseudo >= 0
                   for r in trial.pseudo_records)

    def test_pseudo_records_skipped_for_baseline(self):
        result = run_experiment(tiny_spec(), analyze_pseudo=True)
        assert result.trials[0].pseudo_records == []

    def test_full_fraction_gp_matches_baseline(self):
        base = run_experiment(tiny_spec(labeled_fraction=1.0))
        gp = run_experiment(tiny_spec(method="gp", labeled_fraction=1.0))
        assert base.trials[0].report.mae == gp.trials[0].report.mae


class TestPseudoErrorAnalysis:
    def test_counts_and_exclusions(self):
        spec = tiny_spec(method="gp")
        result = run_experiment(spec)
        trial = result.trials[0]
        train_images, _ = TINY_DS.build()
        labeled = train_images[:3]
        unlabeled = train_images[3:]
        records, excluded = pseudo_error_analysis(
            trial.params, labeled, unlabeled, trial.config)
        assert len(records) + excluded == len(unlabeled)


class TestCarveValidation:
    def test_sizes_disjoint_and_cover(self):
        train, _ = TINY_DS.build()
        rest, val = carve_validation(train, seed=3, fraction=0.25)
        assert len(val) == 3 and len(rest) == 9
        rest_ids = {im.id for im in rest}
        val_ids = {im.id for im in val}
        assert rest_ids.isdisjoint(val_ids)
        assert rest_ids | val_ids == {im.id for im in train}

    def test_deterministic_per_seed(self):
        train, _ = TINY_DS.build()
        _, val_a = carve_validation(train, seed=3)
        _, val_b = carve_validation(train, seed=3)
        _, val_c = carve_validation(train, seed=4)
        assert [im.id for im in val_a] == [im.id for im in val_b]
        assert [im.id for im in val_a] != [im.id for im in val_c]

    def test_fraction_validated(self):
        train, _ = TINY_DS.build()
        with pytest.raises(ConfigError):
            carve_validation(train, seed=0, fraction=0.0)
        with pytest.raises(ConfigError):
            carve_validation(train, seed=0, fraction=1.0)


class TestAttachMeanGains:
    def test_gain_on_method_mean_rows_only(self):
        rows = [
            MetricsRow("a", 0.05, "baseline", 10.0, 20.0, None, 0),
            MetricsRow("a", 0.05, "baseline", 10.0, 20.0, None, "mean"),
            MetricsRow("b", 0.05, "gp", 8.0, 15.0, None, 0),
            MetricsRow("b", 0.05, "gp", 8.0, 15.0, None, "mean"),
        ]
        out = attach_mean_gains(rows)
        assert out[0].ag is None and out[1].ag is None and out[2].ag is None
        assert out[3].ag == pytest.approx(100 * 0.5 * (0.2 + 0.25))

    def test_no_baseline_leaves_rows_unchanged(self):
        rows = [MetricsRow("b", 0.05, "gp", 8.0, 15.0, None, "mean")]
        assert attach_mean_gains(rows)[0].ag is None

    def test_gain_matched_by_fraction(self):
        rows = [
            MetricsRow("a", 0.25, "baseline", 10.0, 20.0, None, "mean"),
            MetricsRow("b", 0.05, "gp", 8.0, 15.0, None, "mean"),
        ]
        assert attach_mean_gains(rows)[1].ag is None


class TestRunSweep:
    def test_axis_validated(self):
        with pytest.raises(ConfigError):
            run_sweep("epochs", [1, 2], dataset=TINY_DS,
                      train_config=TINY_TRAIN)

    def test_values_required(self):
        with pytest.raises(ConfigError):
            run_sweep("lambda_un", [], dataset=TINY_DS,
                      train_config=TINY_TRAIN)

    def test_methods_validated(self):
        with pytest.raises(ConfigError):
            run_sweep("lambda_un", [0.5], methods=("boosting",),
                      dataset=TINY_DS, train_config=TINY_TRAIN)

    def test_fraction_axis_runs_baseline_and_gp_on_test(self):
        result = run_sweep("labeled_fraction", [0.25, 0.5],
                           dataset=TINY_DS, train_config=TINY_TRAIN,
                           trials=1)
        assert isinstance(result, SweepResult)
        names = [e.spec.name for e in result.experiments]
        assert names == ["labeled_fraction-0.25-baseline",
                         "labeled_fraction-0.25-gp",
                         "labeled_fraction-0.5-baseline",
                         "labeled_fraction-0.5-gp"]
        # Scored on the held-out test set.
        assert result.experiments[0].trials[0].report.n_images == 4
        gp_means = [r for r in result.rows
                    if r.method == "gp" and r.seed == "mean"]
        assert all(r.ag is not None for r in gp_means)

    def test_knob_axis_runs_gp_on_validation_carve(self):
        result = run_sweep("lambda_un", [0.0, 0.6], dataset=TINY_DS,
                           train_config=TINY_TRAIN, labeled_fraction=0.25,
                           trials=1)
        assert [e.spec.name for e in result.experiments] == \
            ["lambda_un-0-gp", "lambda_un-0.6-gp"]
        # ceil(0.1 * 12) = 2 validation images; no gains without a baseline.
        assert result.experiments[0].trials[0].report.n_images == 2
        assert all(r.ag is None for r in result.rows)

    def test_n_neighbors_axis(self):
        result = run_sweep("n_neighbors", [1, 2], dataset=TINY_DS,
                           train_config=TINY_TRAIN, labeled_fraction=0.25,
                           trials=1)
        assert [e.spec.train.n_neighbors for e in result.experiments] == [1, 2]
        assert [e.spec.name for e in result.experiments] == \
            ["n_neighbors-1-gp", "n_neighbors-2-gp"]


class TestRunTransfer:
    def test_rows_cover_both_arms(self):
        spec = TransferSpec(
            source=DatasetSpec(n_train=8, n_test=2, size=(32, 32),
                               count_range=(2, 6), seed=3),
            target=DatasetSpec(n_train=8, n_test=3, size=(32, 32),
                               count_range=(2, 6), seed=4,
                               style=DomainStyle(dot_radius=2.2,
                                                 seed_offset=1)),
            train=TINY_TRAIN, trials=2)
        result = run_transfer(spec)
        assert [r.run_id for r in result.rows] == \
            ["transfer-no-adapt"] * 3 + ["transfer-gp"] * 3
        assert [r.seed for r in result.rows] == [0, 1, "mean"] * 2
        # Both arms are scored on the same held-out target images.
        assert all(t.report.n_images == 3
                   for t in result.no_adapt + result.adapted)
        assert result.no_adapt[0].n_unlabeled == 0
        assert result.adapted[0].n_unlabeled == 8
        gp_mean = result.rows[-1]
        assert gp_mean.method == "gp" and gp_mean.ag is not None

    def test_trials_validated(self):
        with pytest.raises(ConfigError):
            TransferSpec(trials=0)
