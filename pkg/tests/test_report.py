import math

import numpy as np
import pytest

from cyclelife.core import TEST_HIGH_DOD, TEST_LOW_DOD, TRAIN
from cyclelife.features import assemble_matrix
from cyclelife.regress import fit_tuned_elastic_net, predict_matrix
from cyclelife.report import (
    ModelPredictions,
    comparison_table,
    default_pair_features,
    emit_feature_scatter,
    emit_hbm_intervals,
    emit_lifetime_histogram,
    emit_pred_vs_true,
    mape,
    rmse,
    week_pair_sweep,
    write_comparison_csv,
    write_sweep_csv,
)


class TestMetrics:
    def test_mape_hand_value(self):
        assert mape([10, 20], [11, 18]) == pytest.approx(10.0)

    def test_mape_zero_error(self):
        assert mape([5, 7], [5, 7]) == 0.0

    def test_mape_double(self):
        y = np.array([3.0, 8.0, 11.0])
        assert mape(y, 2 * y) == pytest.approx(100.0)

    def test_mape_rejects_zero_truth(self):
        with pytest.raises(ValueError):
            mape([0.0, 1.0], [1.0, 1.0])

    def test_rmse_hand_value(self):
        # residuals (3, -4) -> sqrt(25/2)
        assert rmse([10, 10], [7, 14]) == pytest.approx(math.sqrt(12.5))
        assert rmse([10, 10], [7, 14]) == pytest.approx(3.5355, abs=1e-4)

    def test_rmse_zero(self):
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0

    def test_rmse_constant_offset(self):
        y = np.array([5.0, 9.0, 13.0])
        assert rmse(y, y + 2.5) == pytest.approx(2.5)

    def test_rmse_empty_rejected(self):
        with pytest.raises(ValueError):
            rmse([], [])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(1, 30))
            y = rng.uniform(0.5, 50, n)
            p = rng.uniform(0.5, 50, n)
            m_ref = sum(abs((a - b) / a) for a, b in zip(y, p)) / n * 100
            r_ref = math.sqrt(sum((a - b) ** 2 for a, b in zip(y, p)) / n)
            assert mape(y, p) == pytest.approx(m_ref, abs=1e-12)
            assert rmse(y, p) == pytest.approx(r_ref, abs=1e-12)


class TestComparisonTable:
    def _preds(self):
        y = np.array([10.0, 20.0, 30.0])
        p = np.array([11.0, 19.0, 33.0])
        return ModelPredictions(
            model="m", n_features=2,
            by_split={TRAIN: (y, p), TEST_HIGH_DOD: (y, p)},
        )

    def test_rows(self):
        rows = comparison_table([self._preds()])
        assert rows[0].mape_by_split[TRAIN] == pytest.approx(mape([10, 20, 30], [11, 19, 33]))
        assert rows[0].mape_by_split[TEST_LOW_DOD] is None
        assert rows[0].rmse_by_split[TEST_HIGH_DOD] == pytest.approx(
            rmse([10, 20, 30], [11, 19, 33])
        )

    def test_identical_models_identical_rows(self):
        rows = comparison_table([self._preds(), self._preds()])
        assert rows[0].mape_by_split == rows[1].mape_by_split
        assert rows[0].rmse_by_split == rows[1].rmse_by_split

    def test_byte_identical_output(self, tmp_path):
        rows = comparison_table([self._preds()])
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_comparison_csv(rows, a, provenance="config_hash=x version=y")
        write_comparison_csv(rows, b, provenance="config_hash=x version=y")
        assert a.read_bytes() == b.read_bytes()


class TestPlotData:
    def test_lifetime_histogram_columns(self, tmp_path):
        lifetimes = {(1, 1): 5.0, (1, 2): 6.0, (2, 1): 20.0}
        splits = {(1, 1): TRAIN, (1, 2): TRAIN, (2, 1): TEST_LOW_DOD}
        path = tmp_path / "hist.csv"
        emit_lifetime_histogram(lifetimes, splits, path, n_bins=5)
        lines = path.read_text().strip().splitlines()
        assert lines[0].split(",")[:3] == ["bin_lo_weeks", "bin_hi_weeks", "count"]
        lo = float(lines[1].split(",")[0])
        hi = float(lines[-1].split(",")[1])
        assert lo == pytest.approx(5.0)
        assert hi == pytest.approx(20.0)
        total = sum(int(l.split(",")[2]) for l in lines[1:])
        assert total == 3

    def test_scatter_columns(self, tmp_path):
        path = tmp_path / "scatter.csv"
        emit_feature_scatter(
            "f", {(1, 1): 0.5}, {(1, 1): 12.0}, {(1, 1): TRAIN}, path
        )
        header, row = path.read_text().strip().splitlines()
        assert header == "cell,feature_value,lifetime_weeks,split"
        assert row.split(",")[0] == "G1C1"

    def test_pred_vs_true_columns(self, tmp_path):
        path = tmp_path / "pred.csv"
        emit_pred_vs_true({(1, 1): 11.0}, {(1, 1): 10.0}, {(1, 1): TRAIN}, path)
        header, row = path.read_text().strip().splitlines()
        assert header == "cell,split,true_weeks,pred_weeks,residual_weeks"
        assert float(row.split(",")[4]) == pytest.approx(1.0)

    def test_interval_columns(self, tmp_path):
        path = tmp_path / "iv.csv"
        emit_hbm_intervals({(1, 1): (2, 10.0, 8.0, 12.0)}, {(1, 1): 9.5}, path)
        header, row = path.read_text().strip().splitlines()
        assert header == "cell,cluster,pred_mean,pred_lo,pred_hi,true"
        assert row.split(",")[1] == "2"


class TestWeekPairSweep:
    @pytest.fixture(scope="class")
    def sweep_inputs(self, synth_curves):
        dataset, result, truths = synth_curves
        lifetimes = {c.key: c.lifetime_weeks for c in dataset.cells
                     if c.lifetime_weeks is not None}
        return dataset, lifetimes

    def test_absent_week_skipped_with_notation(self, sweep_inputs):
        dataset, lifetimes = sweep_inputs
        rows = week_pair_sweep(dataset, [(0.0, 99.0)], lifetimes, seed=0)
        assert rows[0].status.startswith("skipped")
        assert rows[0].mape_high is None

    def test_headline_pair_matches_direct_run(self, sweep_inputs):
        dataset, lifetimes = sweep_inputs
        tune_kwargs = dict(alphas=(0.0, 0.5, 1.0), lambdas=(1e-4, 1e-2, 1.0),
                           k=4, repeats=1)
        rows = week_pair_sweep(dataset, [(0.0, 3.0)], lifetimes, seed=7,
                               tune_kwargs=tune_kwargs)
        assert rows[0].status == "ok"

        # same feature pair, same seed, run by hand
        cols = default_pair_features(dataset, (3.0, 0.0))
        matrix, _ = assemble_matrix(cols, policy="drop")
        keys = [k for k in matrix.cell_keys if k in lifetimes]
        matrix = matrix.restrict(keys)
        tags = dataset.splits.tags
        train_keys = [k for k in matrix.cell_keys if tags.get(k) == TRAIN]
        train = matrix.restrict(train_keys)
        y_log = np.log([lifetimes[k] for k in train.cell_keys])
        fit, _ = fit_tuned_elastic_net(
            train, train.feature_names, y_log, [k[0] for k in train.cell_keys],
            seed=7, **tune_kwargs,
        )
        high = matrix.restrict([k for k in matrix.cell_keys
                                if tags.get(k) == TEST_HIGH_DOD])
        pred = predict_matrix(fit, high)
        truth = np.array([lifetimes[k] for k in high.cell_keys])
        assert rows[0].mape_high == pytest.approx(mape(truth, pred), abs=1e-9)
        assert rows[0].rmse_high == pytest.approx(rmse(truth, pred), abs=1e-9)

    def test_sweep_csv_format(self, sweep_inputs, tmp_path):
        dataset, lifetimes = sweep_inputs
        tune_kwargs = dict(alphas=(0.5,), lambdas=(1e-3,), k=4, repeats=1)
        rows = week_pair_sweep(dataset, [(0.0, 2.0), (0.0, 99.0)], lifetimes,
                               seed=0, tune_kwargs=tune_kwargs)
        path = tmp_path / "sweep.csv"
        write_sweep_csv(rows, path, provenance="p")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "# p"
        assert lines[1].startswith("week_i,week_j,status,")
        assert len(lines) == 4
