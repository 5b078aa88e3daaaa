"""Tests for configuration handling, the optimizer, and the training loop."""

import numpy as np
import pytest

from gpcount import autodiff as ad
from gpcount.data import DomainStyle, SplitConfig, generate_dataset, \
    split_dataset
from gpcount.errors import ConfigError, DivergenceError
from gpcount.model import ModelConfig, init_params
from gpcount.training import Adam, TrainConfig, TrainState, \
    apply_env_overrides, labeled_stage, load_config_file, train, \
    unlabeled_stage

SMALL_MODEL = ModelConfig(input_hw=(32, 32), hidden_channels=(3, 4, 6),
                          latent_channels=4)


def tiny_data(n=6, seed=0, counts=(2, 6)):
    return generate_dataset(n, (32, 32), counts, DomainStyle(), seed=seed)


def params_snapshot(params):
    return {k: v.value.copy() for k, v in params.tensors.items()}


def assert_params_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lambda_un == 0.6
        assert cfg.n_neighbors == 8
        assert cfg.noise_variance == 1.0
        assert cfg.adam_beta1 == 0.9
        assert not cfg.gp_enabled and not cfg.ranking_enabled

    def test_gp_and_ranking_exclusive(self):
        with pytest.raises(ConfigError):
            TrainConfig(gp_enabled=True, ranking_enabled=True)

    def test_positive_rates_required(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(noise_variance=0.0)

    def test_crop_size_must_align(self):
        with pytest.raises(ConfigError):
            TrainConfig(crop_size=12)
        assert TrainConfig(crop_size=16).crop_size == 16


class TestConfigFile:
    def test_round_trip_keys(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# experiment configuration\n"
            "lambda_un = 0.4\n"
            "epochs = 3\n"
            "gp_enabled = true\n"
            "neighbor_metric = euclidean\n"
            "\n")
        cfg = load_config_file(str(path))
        assert cfg.lambda_un == 0.4
        assert cfg.epochs == 3
        assert cfg.gp_enabled is True
        assert cfg.neighbor_metric == "euclidean"

    def test_unknown_key_names_file_and_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 2\nbogus_key = 1\n")
        with pytest.raises(ConfigError, match=r"run\.cfg:2"):
            load_config_file(str(path))

    def test_bad_value_names_file_and_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = banana\n")
        with pytest.raises(ConfigError, match=r"run\.cfg:1"):
            load_config_file(str(path))

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs 2\n")
        with pytest.raises(ConfigError, match=r"run\.cfg:1"):
            load_config_file(str(path))

    def test_env_overrides(self):
        cfg = apply_env_overrides(TrainConfig(),
                                  environ={"GPCOUNT_EPOCHS": "7",
                                           "GPCOUNT_LAMBDA_UN": "0.2",
                                           "UNRELATED": "x"})
        assert cfg.epochs == 7
        assert cfg.lambda_un == 0.2

    def test_env_override_bad_value(self):
        with pytest.raises(ConfigError, match="GPCOUNT_EPOCHS"):
            apply_env_overrides(TrainConfig(),
                                environ={"GPCOUNT_EPOCHS": "many"})

    def test_env_override_unknown_field(self):
        with pytest.raises(ConfigError, match="GPCOUNT_NO_SUCH"):
            apply_env_overrides(TrainConfig(),
                                environ={"GPCOUNT_NO_SUCH": "1"})


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = ad.parameter(np.ones(4))
        opt = Adam([p], learning_rate=0.1)
        p.grad = np.zeros(4)
        opt.step()
        np.testing.assert_array_equal(p.value, np.ones(4))

    def test_none_gradient_treated_as_zero(self):
        p = ad.parameter(np.ones(4))
        opt = Adam([p], learning_rate=0.1)
        opt.step()
        np.testing.assert_array_equal(p.value, np.ones(4))

    def test_first_step_size_is_learning_rate(self):
        p = ad.parameter(np.zeros(3))
        opt = Adam([p], learning_rate=0.05)
        p.grad = np.array([1.0, -2.0, 0.5])
        opt.step()
        # Bias-corrected Adam's first step is lr * sign(grad).
        np.testing.assert_allclose(p.value, [-0.05, 0.05, -0.05], atol=1e-9)

    def test_descends_quadratic(self):
        p = ad.parameter(np.array([5.0]))
        opt = Adam([p], learning_rate=0.1)
        for _ in range(200):
            p.zero_grad()
            p.grad = 2.0 * p.value
            opt.step()
        assert abs(float(p.value[0])) < 0.5


class TestLabeledStage:
    def test_zero_learning_rate_keeps_params(self):
        images = tiny_data(3)
        cfg = TrainConfig(learning_rate=1e-30, epochs=1, batch_size=2)
        params = init_params(cfg.seed, SMALL_MODEL)
        state = TrainState(params=params,
                           optimizer=Adam(params.parameters(), 0.0))
        before = params_snapshot(params)
        labeled_stage(state, images, cfg)
        assert_params_equal(before, params_snapshot(params))
        assert state.bank is not None
        assert len(state.bank) == 3

    def test_bank_rebuilt_after_pass(self):
        images = tiny_data(4)
        cfg = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=2)
        params = init_params(cfg.seed, SMALL_MODEL)
        state = TrainState(params=params,
                           optimizer=Adam(params.parameters(),
                                          cfg.learning_rate))
        labeled_stage(state, images, cfg)
        from gpcount.gp import rebuild_bank
        fresh = rebuild_bank(images, state.params, gt_sigma=cfg.gt_sigma)
        np.testing.assert_array_equal(state.bank.features, fresh.features)

    def test_loss_strictly_decreases_on_toy_set(self):
        # Two samples in a single batch: 50 optimizer steps, each one must
        # lower the supervised loss.
        images = tiny_data(2, counts=(3, 5))
        cfg = TrainConfig(learning_rate=3e-4, epochs=50, batch_size=2,
                          flip_augment=False)
        params, history = train(images, [], cfg, model_config=SMALL_MODEL)
        losses = np.array([row["supervised"] for row in history])
        assert len(losses) == 50
        assert (np.diff(losses) < 0.0).all()

    def test_history_contains_epoch_and_supervised(self):
        images = tiny_data(2)
        cfg = TrainConfig(epochs=2, batch_size=2)
        _, history = train(images, [], cfg, model_config=SMALL_MODEL)
        assert len(history) == 2
        for i, row in enumerate(history):
            assert row["epoch"] == i
            assert "supervised" in row
            assert "unsupervised" not in row


class TestUnlabeledStage:
    def test_requires_bank(self):
        from gpcount.errors import StateError
        cfg = TrainConfig(gp_enabled=True)
        params = init_params(0, SMALL_MODEL)
        state = TrainState(params=params,
                           optimizer=Adam(params.parameters(), 1e-3))
        with pytest.raises(StateError):
            unlabeled_stage(state, tiny_data(2), cfg)

    def test_lambda_zero_keeps_params(self):
        images = tiny_data(4)
        cfg = TrainConfig(gp_enabled=True, lambda_un=0.0, epochs=1,
                          batch_size=2)
        params = init_params(cfg.seed, SMALL_MODEL)
        state = TrainState(params=params,
                           optimizer=Adam(params.parameters(),
                                          cfg.learning_rate))
        labeled_stage(state, images[:2], cfg)
        before = params_snapshot(state.params)
        unlabeled_stage(state, images[2:], cfg)
        assert_params_equal(before, params_snapshot(state.params))

    def test_bank_not_mutated_by_unlabeled_pass(self):
        images = tiny_data(6)
        cfg = TrainConfig(gp_enabled=True, epochs=1, batch_size=2)
        params = init_params(cfg.seed, SMALL_MODEL)
        state = TrainState(params=params,
                           optimizer=Adam(params.parameters(),
                                          cfg.learning_rate))
        labeled_stage(state, images[:3], cfg)
        feats = state.bank.features.copy()
        targets = state.bank.targets.copy()
        unlabeled_stage(state, images[3:], cfg)
        np.testing.assert_array_equal(state.bank.features, feats)
        np.testing.assert_array_equal(state.bank.targets, targets)

    def test_records_mean_variance_within_bounds(self):
        images = tiny_data(6)
        cfg = TrainConfig(gp_enabled=True, epochs=1, batch_size=2)
        params = init_params(cfg.seed, SMALL_MODEL)
        state = TrainState(params=params,
                           optimizer=Adam(params.parameters(),
                                          cfg.learning_rate))
        state.history_row = {}
        labeled_stage(state, images[:3], cfg)
        unlabeled_stage(state, images[3:], cfg)
        assert 1.0 <= state.history_row["mean_variance"] <= 2.0


class TestTrain:
    def test_identical_seeds_bitwise_identical(self):
        images = tiny_data(6)
        labeled, unlabeled = images[:3], images[3:]
        cfg = TrainConfig(gp_enabled=True, epochs=2, batch_size=2, seed=4)
        a, _ = train(labeled, unlabeled, cfg, model_config=SMALL_MODEL)
        b, _ = train(labeled, unlabeled, cfg, model_config=SMALL_MODEL)
        assert_params_equal(params_snapshot(a), params_snapshot(b))

    def test_seed_changes_trajectory(self):
        images = tiny_data(6)
        cfg1 = TrainConfig(epochs=1, batch_size=2, seed=0)
        cfg2 = TrainConfig(epochs=1, batch_size=2, seed=1)
        a, _ = train(images, [], cfg1, model_config=SMALL_MODEL)
        b, _ = train(images, [], cfg2, model_config=SMALL_MODEL)
        assert any(not np.array_equal(a.tensors[k].value, b.tensors[k].value)
                   for k in a.tensors)

    def test_gp_with_empty_unlabeled_reduces_to_baseline(self):
        images = tiny_data(4)
        base_cfg = TrainConfig(epochs=2, batch_size=2, seed=7)
        gp_cfg = TrainConfig(epochs=2, batch_size=2, seed=7, gp_enabled=True)
        a, _ = train(images, [], base_cfg, model_config=SMALL_MODEL)
        b, _ = train(images, [], gp_cfg, model_config=SMALL_MODEL)
        assert_params_equal(params_snapshot(a), params_snapshot(b))

    def test_gp_history_has_unsupervised_and_variance(self):
        images = tiny_data(6)
        cfg = TrainConfig(gp_enabled=True, epochs=2, batch_size=2)
        _, history = train(images[:3], images[3:], cfg,
                           model_config=SMALL_MODEL)
        for row in history:
            assert "supervised" in row
            assert "unsupervised" in row
            assert 1.0 <= row["mean_variance"] <= 2.0

    def test_ranking_history_has_ranking_loss(self):
        images = tiny_data(6)
        cfg = TrainConfig(ranking_enabled=True, epochs=1, batch_size=2)
        _, history = train(images[:3], images[3:], cfg,
                           model_config=SMALL_MODEL)
        assert "ranking" in history[0]

    def test_interleaved_variant_runs(self):
        images = tiny_data(6)
        cfg = TrainConfig(gp_enabled=True, interleave_batches=True, epochs=1,
                          batch_size=2)
        _, history = train(images[:3], images[3:], cfg,
                           model_config=SMALL_MODEL)
        assert "supervised" in history[0]
        assert "unsupervised" in history[0]

    def test_empty_labeled_rejected(self):
        with pytest.raises(ConfigError):
            train([], tiny_data(2), TrainConfig())

    def test_unlabeled_annotations_do_not_matter(self):
        # Erasing unlabeled annotations must not change training at all.
        images = tiny_data(6)
        labeled, unlabeled = images[:3], images[3:]
        stripped = [type(im)(id=im.id, pixels=im.pixels, points=())
                    for im in unlabeled]
        cfg = TrainConfig(gp_enabled=True, epochs=2, batch_size=2)
        a, _ = train(labeled, unlabeled, cfg, model_config=SMALL_MODEL)
        b, _ = train(labeled, stripped, cfg, model_config=SMALL_MODEL)
        assert_params_equal(params_snapshot(a), params_snapshot(b))

    def test_divergence_guard(self):
        images = tiny_data(2, counts=(30, 40))
        cfg = TrainConfig(learning_rate=1e60, epochs=3, batch_size=2,
                          flip_augment=False)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError):
                train(images, [], cfg, model_config=SMALL_MODEL)

    def test_split_then_train_end_to_end(self):
        images = tiny_data(10)
        labeled, unlabeled = split_dataset(images, SplitConfig(0.3, seed=1))
        cfg = TrainConfig(gp_enabled=True, epochs=1, batch_size=4)
        params, history = train(labeled, unlabeled, cfg,
                                model_config=SMALL_MODEL)
        assert len(history) == 1
        assert params.config == SMALL_MODEL
