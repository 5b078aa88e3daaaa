"""Tests for counting metrics, gain aggregation, histograms, and CSV output."""

import numpy as np
import pytest

from gpcount import model as M
from gpcount.data import DomainStyle, generate_dataset
from gpcount.errors import ContractError
from gpcount.metrics import HIST_HEADER, METRICS_HEADER, PER_IMAGE_HEADER, \
    MetricsReport, MetricsRow, PerImageResult, PseudoErrorRecord, \
    average_gain, evaluate, format_gain, format_number, mae_mse, \
    pseudo_error_histogram, pseudo_error_records, render_metrics_csv, \
    render_per_image_csv, render_pseudo_hist_csv, write_text_atomic

rng = np.random.default_rng(77)


class TestMaeMse:
    def test_identical_pairs(self):
        assert mae_mse([(5.0, 5.0), (9.0, 9.0)]) == (0.0, 0.0)

    def test_analytic_case(self):
        mae, mse = mae_mse([(10.0, 12.0), (20.0, 17.0)])
        assert mae == pytest.approx(2.5, abs=1e-15)
        assert mse == pytest.approx(np.sqrt((4.0 + 9.0) / 2.0), abs=1e-12)

    def test_matches_direct_oracle(self):
        pairs = [(float(g), float(p))
                 for g, p in rng.uniform(0, 50, size=(100, 2))]
        mae, mse = mae_mse(pairs)
        diffs = np.array([g - p for g, p in pairs])
        assert mae == pytest.approx(np.mean(np.abs(diffs)), rel=1e-12)
        assert mse == pytest.approx(np.sqrt(np.mean(diffs ** 2)), rel=1e-12)

    def test_permutation_invariant(self):
        pairs = [(float(g), float(p))
                 for g, p in rng.uniform(0, 50, size=(20, 2))]
        assert mae_mse(pairs) == mae_mse(list(reversed(pairs)))

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            mae_mse([])


class TestAverageGain:
    def test_table_value_sixteen(self):
        ag = average_gain((118.0, 211.0), (102.0, 172.0))
        assert format_gain(ag) == "16"

    def test_table_value_twenty_two(self):
        ag = average_gain((21.2, 34.2), (15.7, 27.9))
        assert format_gain(ag) == "22"

    def test_no_change_is_zero(self):
        assert average_gain((10.0, 20.0), (10.0, 20.0)) == 0.0

    def test_improvement_positive(self):
        assert average_gain((10.0, 10.0), (8.0, 8.0)) == pytest.approx(20.0)

    def test_regression_negative(self):
        assert average_gain((10.0, 10.0), (12.0, 12.0)) < 0.0

    def test_antisymmetry_for_small_changes(self):
        fwd = average_gain((100.0, 100.0), (99.0, 99.0))
        rev = average_gain((99.0, 99.0), (100.0, 100.0))
        assert fwd == pytest.approx(-rev, rel=0.05)

    def test_zero_baseline_rejected(self):
        with pytest.raises(ContractError):
            average_gain((0.0, 10.0), (1.0, 1.0))


class TestPseudoErrorAnalysis:
    def test_records_normalize_by_gt(self):
        samples = [("a", 10.0, 12.0, 11.0)]
        records, excluded = pseudo_error_records(samples)
        assert excluded == 0
        assert records[0].err_pred == pytest.approx(0.2)
        assert records[0].err_pseudo == pytest.approx(0.1)

    def test_zero_gt_excluded_with_count(self):
        samples = [("a", 0.0, 2.0, 1.0), ("b", 10.0, 10.0, 10.0)]
        records, excluded = pseudo_error_records(samples)
        assert excluded == 1
        assert [r.id for r in records] == ["b"]

    def test_all_equal_errors_single_occupied_bin(self):
        records = [PseudoErrorRecord("x", 0.5, 0.5, 10.0)] * 4
        edges, pred_counts, pseudo_counts = pseudo_error_histogram(records,
                                                                   bins=5)
        assert pred_counts.sum() == 4
        assert pseudo_counts.sum() == 4
        assert (pred_counts > 0).sum() == 1
        assert (pseudo_counts > 0).sum() == 1

    def test_pseudo_mass_in_lower_bin(self):
        records = [PseudoErrorRecord("a", 0.5, 0.1, 5.0),
                   PseudoErrorRecord("b", 0.5, 0.1, 5.0)]
        edges, pred_counts, pseudo_counts = pseudo_error_histogram(records,
                                                                   bins=2)
        assert pseudo_counts[0] == 2 and pseudo_counts[1] == 0
        assert pred_counts[0] == 0 and pred_counts[1] == 2

    def test_total_mass_preserved(self):
        records = [PseudoErrorRecord(f"r{i}", float(a), float(b), 3.0)
                   for i, (a, b) in enumerate(rng.uniform(0, 2, (50, 2)))]
        _, pred_counts, pseudo_counts = pseudo_error_histogram(records,
                                                               bins=10)
        assert pred_counts.sum() == 50
        assert pseudo_counts.sum() == 50

    def test_shared_edges_cover_both_series(self):
        records = [PseudoErrorRecord("a", 2.0, 0.0, 1.0)]
        edges, pred_counts, pseudo_counts = pseudo_error_histogram(records,
                                                                   bins=4)
        assert edges[0] == 0.0 and edges[-1] == 2.0


class TestEvaluate:
    def test_counts_against_known_data(self):
        cfg = M.ModelConfig(input_hw=(32, 32), hidden_channels=(2, 3, 4),
                            latent_channels=4)
        params = M.init_params(0, cfg)
        images = generate_dataset(4, (32, 32), (2, 8), DomainStyle(), seed=3)
        report = mae_mse_report = evaluate(params, images)
        assert report.n_images == 4
        preds = M.predict_values(np.stack([im.pixels for im in images]),
                                 params)
        expect_pairs = [(float(im.gt_count), float(p.sum()))
                        for im, p in zip(images, preds)]
        mae, mse = mae_mse(expect_pairs)
        assert mae_mse_report.mae == pytest.approx(mae, rel=1e-12)
        assert mae_mse_report.mse == pytest.approx(mse, rel=1e-12)
        assert [r.id for r in report.per_image] == [im.id for im in images]


class TestFormatting:
    def test_six_significant_digits(self):
        assert format_number(123.456789) == "123.457"
        assert format_number(0.000123456789) == "0.000123457"
        assert format_number(1000000.0) == "1e+06"

    def test_negative_zero_normalized(self):
        assert format_number(-0.0) == "0"

    def test_integers_stay_clean(self):
        assert format_number(5.0) == "5"

    def test_gain_two_significant_digits(self):
        assert format_gain(16.047) == "16"
        assert format_gain(22.2) == "22"
        assert format_gain(5.25) == "5.2"
        assert format_gain(-3.333) == "-3.3"


class TestCsvRendering:
    def test_metrics_header_and_rows(self):
        rows = [MetricsRow(run_id="r1", labeled_fraction=0.05, method="gp",
                           mae=3.25, mse=4.5, ag=16.0, seed=1),
                MetricsRow(run_id="r1-mean", labeled_fraction=0.05,
                           method="gp", mae=3.0, mse=4.0, ag=None, seed=0)]
        text = render_metrics_csv(rows)
        lines = text.splitlines()
        assert lines[0] == METRICS_HEADER == \
            "run_id,labeled_fraction,method,mae,mse,ag,seed"
        assert lines[1] == "r1,0.05,gp,3.25,4.5,16,1"
        assert lines[2] == "r1-mean,0.05,gp,3,4,,0"

    def test_per_image_csv(self):
        report = MetricsReport(
            mae=0.25, mse=0.25, n_images=1,
            per_image=(PerImageResult(id="im0", gt_count=4.0,
                                      pred_count=3.75),))
        text = render_per_image_csv(report)
        lines = text.splitlines()
        assert lines[0] == PER_IMAGE_HEADER == "id,gt_count,pred_count"
        assert lines[1] == "im0,4,3.75"

    def test_pseudo_hist_csv(self):
        records = [PseudoErrorRecord("a", 0.4, 0.1, 5.0),
                   PseudoErrorRecord("b", 1.2, 0.3, 5.0)]
        edges, pred_counts, pseudo_counts = pseudo_error_histogram(records,
                                                                   bins=2)
        text = render_pseudo_hist_csv(edges, pred_counts, pseudo_counts)
        lines = text.splitlines()
        assert lines[0] == HIST_HEADER == "bin_lo,bin_hi,pred_count,pseudo_count"
        assert len(lines) == 3

    def test_stable_bytes(self):
        rows = [MetricsRow("x", 0.25, "baseline", 1.5, 2.5, None, 3)]
        assert render_metrics_csv(rows) == render_metrics_csv(rows)

    def test_atomic_write_round_trip(self, tmp_path):
        target = tmp_path / "out.csv"
        write_text_atomic(target, "h\n1\n")
        assert target.read_text() == "h\n1\n"
        assert list(tmp_path.iterdir()) == [target]
