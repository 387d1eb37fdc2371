import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cyclelife.core import SplitAssignment, TRAIN, default_voltage_grid
from cyclelife.curves import CellCurveData, CurveDataset, DvaLandmarks
from cyclelife.features import (
    FLAG_ABSENT_LANDMARK,
    FLAG_DEGENERATE,
    LOG_EPS,
    assemble_matrix,
    build_feature_columns,
    feature_capacity,
    feature_cv_time,
    feature_delta_q_stats,
    feature_dqdv_stats,
    feature_dva,
    feature_stress,
    pearson_r,
    stress_values,
    window_grid_search,
)
from cyclelife.core import CyclingCondition

GRID = default_voltage_grid(1000)


def make_cell(
    key,
    lifetime=10.0,
    qv=None,
    dqdv=None,
    dva=None,
    cv=None,
    caps=None,
    condition=None,
):
    condition = condition or CyclingCondition(1.0, 0.5, 0.5, 0.5)
    qv = qv if qv is not None else {0.0: 250 - 200 * (GRID - 3.0), 3.0: 240 - 195 * (GRID - 3.0)}
    dqdv = dqdv if dqdv is not None else {w: np.gradient(q, GRID) for w, q in qv.items()}
    weeks = sorted(qv.keys())
    cv = cv if cv is not None else {w: 600.0 + 10 * w for w in weeks}
    caps = caps if caps is not None else {w: float(qv[w][0]) for w in weeks}
    dva = dva if dva is not None else {w: DvaLandmarks(60.0, None, None, 180.0) for w in weeks}
    return CellCurveData(
        key=tuple(key),
        condition=condition,
        lifetime_weeks=lifetime,
        qv=qv,
        dqdv=dqdv,
        dva=dva,
        cv_hold_seconds=cv,
        full_capacity_mAh=caps,
    )


def make_dataset(cells, splits=None):
    return CurveDataset(voltage_grid=GRID, cells=tuple(cells), splits=splits)


class TestPearson:
    def brute(self, x, y):
        n = len(x)
        mx = sum(x) / n
        my = sum(y) / n
        num = sum((a - mx) * (b - my) for a, b in zip(x, y))
        dx = math.sqrt(sum((a - mx) ** 2 for a in x))
        dy = math.sqrt(sum((b - my) ** 2 for b in y))
        return num / (dx * dy)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = rng.integers(3, 40)
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
            assert pearson_r(x, y) == pytest.approx(self.brute(x, y), abs=1e-12)

    def test_constant_is_nan(self):
        assert math.isnan(pearson_r(np.ones(5), np.arange(5.0)))

    def test_perfect_correlation(self):
        x = np.arange(10.0)
        assert pearson_r(x, 3 * x + 1) == pytest.approx(1.0)
        assert pearson_r(x, -2 * x) == pytest.approx(-1.0)


class TestDeltaQStats:
    def test_identical_curves_degenerate(self):
        q = 250 - 200 * (GRID - 3.0)
        cell = make_cell((1, 1), qv={0.0: q, 3.0: q.copy()})
        cols = feature_delta_q_stats(make_dataset([cell]))
        assert cols[0].flags[(1, 1)] == FLAG_DEGENERATE
        assert cols[0].values[(1, 1)] == pytest.approx(math.log(LOG_EPS))

    def test_constant_shift(self):
        q0 = 250 - 200 * (GRID - 3.0)
        cell = make_cell((1, 1), qv={0.0: q0, 3.0: q0 - 5.0})
        cols = feature_delta_q_stats(make_dataset([cell]))
        # log_abs of mean -5, variance 0
        assert cols[0].values[(1, 1)] == pytest.approx(math.log(5.0), abs=1e-9)
        assert cols[1].flags[(1, 1)] == FLAG_DEGENERATE

    def test_missing_rpt_flagged(self):
        q0 = 250 - 200 * (GRID - 3.0)
        cell = make_cell((1, 1), qv={0.0: q0})
        cols = feature_delta_q_stats(make_dataset([cell]))
        assert (1, 1) not in cols[0].values
        assert cols[0].flags[(1, 1)] == "missing_rpt"


class TestDqdvStats:
    def test_constant_delta_over_window(self):
        d0 = -200.0 * np.ones_like(GRID)
        d3 = d0 + 4.0
        cell = make_cell((1, 1), qv={0.0: GRID * 0, 3.0: GRID * 0}, dqdv={0.0: d0, 3.0: d3})
        cols = feature_dqdv_stats(make_dataset([cell]), window=(3.6, 3.9))
        assert cols[0].values[(1, 1)] == pytest.approx(math.log(4.0), abs=1e-9)
        assert cols[1].flags[(1, 1)] == FLAG_DEGENERATE  # variance 0


class TestCvTime:
    def test_delta_arithmetic(self):
        cell = make_cell((1, 1), cv={0.0: 600.0, 3.0: 900.0})
        cols = feature_cv_time(make_dataset([cell]))
        assert cols[2].values[(1, 1)] == pytest.approx(math.log(300.0), abs=1e-9)

    def test_identical_hold_degenerate(self):
        cell = make_cell((1, 1), cv={0.0: 600.0, 3.0: 600.0})
        cols = feature_cv_time(make_dataset([cell]))
        assert cols[2].flags[(1, 1)] == FLAG_DEGENERATE

    def test_nonpositive_hold_flagged(self):
        cell = make_cell((1, 1), cv={0.0: 0.0, 3.0: 600.0})
        cols = feature_cv_time(make_dataset([cell]))
        assert cols[0].flags[(1, 1)] == "nonpositive_value"


class TestCapacity:
    def test_windows_partition_total(self):
        q0 = 250 - (250 / 1.2) * (GRID - 3.0)  # linear, hits 0 at 4.2
        cell = make_cell((1, 1), qv={0.0: q0, 3.0: q0 - 10})
        cols = feature_capacity(make_dataset([cell]))
        # window capacities (log scale) should sum to the full discharge capacity
        win_sum = sum(math.exp(cols[i].values[(1, 1)]) for i in (1, 2, 3))
        total = q0[0] - q0[-1]
        assert win_sum == pytest.approx(total, rel=0.01)

    def test_no_fade_degenerate(self):
        q0 = 250 - 200 * (GRID - 3.0)
        cell = make_cell((1, 1), qv={0.0: q0, 3.0: q0.copy()},
                         caps={0.0: 250.0, 3.0: 250.0})
        cols = feature_capacity(make_dataset([cell]))
        assert cols[-1].flags[(1, 1)] == FLAG_DEGENERATE


class TestDva:
    def test_translation(self):
        cell = make_cell(
            (1, 1),
            dva={
                0.0: DvaLandmarks(60.0, 120.0, 90.0, 180.0),
                3.0: DvaLandmarks(65.0, 125.0, 95.0, 185.0),
            },
        )
        cols = feature_dva(make_dataset([cell]))
        for col in cols:
            assert col.values[(1, 1)] == pytest.approx(5.0)

    def test_no_change_zero(self):
        lm = DvaLandmarks(60.0, 120.0, 90.0, 180.0)
        cell = make_cell((1, 1), dva={0.0: lm, 3.0: lm})
        cols = feature_dva(make_dataset([cell]))
        for col in cols:
            assert col.values[(1, 1)] == 0.0

    def test_absent_landmark_flagged(self):
        cell = make_cell(
            (1, 1),
            dva={0.0: DvaLandmarks(60.0, None, None, 180.0),
                 3.0: DvaLandmarks(62.0, None, None, 183.0)},
        )
        cols = feature_dva(make_dataset([cell]))
        assert cols[1].flags[(1, 1)] == FLAG_ABSENT_LANDMARK
        assert cols[0].values[(1, 1)] == pytest.approx(2.0)


class TestStress:
    def test_formula(self):
        s = stress_values(2.0, 0.5, 1.0)
        assert s["avg"] == pytest.approx((math.sqrt(2) + math.sqrt(0.5)) / 2, abs=1e-6)
        assert s["avg"] == pytest.approx(1.0607, abs=1e-4)
        assert s["mult"] == pytest.approx(math.sqrt(2) * math.sqrt(0.5), abs=1e-9)

    def test_dod_to_zero_limit(self):
        s = stress_values(2.0, 0.5, 1e-12)
        for v in ("chg", "dchg", "avg", "mult"):
            assert s[v] == pytest.approx(0.0, abs=1e-5)

    @given(
        st.floats(0.1, 4.0), st.floats(0.1, 4.0), st.floats(0.01, 1.0),
        st.floats(0.01, 0.5),
    )
    @settings(max_examples=50)
    def test_monotone_in_each_factor(self, c_chg, c_dis, dod, bump):
        base = stress_values(c_chg, c_dis, dod)
        for kwargs in (dict(c_chg=c_chg + bump), dict(c_dis=c_dis + bump)):
            other = stress_values(
                kwargs.get("c_chg", c_chg), kwargs.get("c_dis", c_dis), dod
            )
            for key in ("chg", "dchg", "avg", "mult"):
                assert other[key] >= base[key] - 1e-12
        more_dod = stress_values(c_chg, c_dis, min(dod + bump, 1.0))
        for key in ("chg", "dchg", "avg", "mult"):
            assert more_dod[key] >= base[key] - 1e-12

    def test_columns_use_measured_dod(self):
        cond = CyclingCondition(1.0, 1.0, dod_design=0.9, dod_measured=0.25)
        cell = make_cell((1, 1), condition=cond)
        cols = feature_stress(make_dataset([cell]))
        by_name = {c.name: c for c in cols}
        assert by_name["cond.dod"].values[(1, 1)] == 0.25
        assert by_name["stress.avg"].values[(1, 1)] == pytest.approx(math.sqrt(0.25))


class TestAssemble:
    def _cols(self):
        cells = [make_cell((1, i)) for i in (1, 2, 3)]
        ds = make_dataset(cells)
        return feature_cv_time(ds) + feature_stress(ds)

    def test_full_matrix(self):
        cols = self._cols()
        matrix, report = assemble_matrix(cols)
        assert matrix.values.shape == (3, len(cols))
        assert report.dropped_cells == ()

    def test_drop_policy(self):
        cols = self._cols()
        del cols[0].values[(1, 2)]
        cols[0].flags[(1, 2)] = "missing_rpt"
        matrix, report = assemble_matrix(cols, policy="drop")
        assert matrix.values.shape[0] == 2
        assert report.dropped_cells == ((1, 2),)

    def test_impute_median(self):
        cols = self._cols()
        others = [cols[0].values[(1, 1)], cols[0].values[(1, 3)]]
        del cols[0].values[(1, 2)]
        matrix, report = assemble_matrix(cols, policy="impute_median")
        assert matrix.values.shape[0] == 3
        row = list(matrix.cell_keys).index((1, 2))
        assert matrix.values[row, 0] == pytest.approx(float(np.median(others)))
        assert ((1, 2), cols[0].name) in report.imputed

    def test_empty_intersection_raises(self):
        cols = self._cols()
        for c in cols:
            c.values.clear()
        with pytest.raises(ValueError):
            assemble_matrix(cols, policy="drop")


def planted_window_dataset(n_cells=24, signal_window=(3.5, 3.7), noise=0.5, seed=0,
                           lifetime_scale=1.0, tag_all_train=True):
    rng = np.random.default_rng(seed)
    mask = (GRID >= signal_window[0]) & (GRID <= signal_window[1])
    cells = []
    tags = {}
    for i in range(n_cells):
        k = math.exp(rng.uniform(-1.0, 1.0))
        d0 = np.zeros_like(GRID)
        d3 = np.where(mask, k, noise * rng.standard_normal(GRID.size))
        lifetime = lifetime_scale * math.exp(3.0 - math.log(k))
        key = (i + 1, 1)
        cells.append(
            make_cell(key, lifetime=lifetime,
                      qv={0.0: GRID * 0, 3.0: GRID * 0},
                      dqdv={0.0: d0, 3.0: d3})
        )
        tags[key] = TRAIN
    splits = SplitAssignment(tags) if tag_all_train else None
    return make_dataset(cells, splits=splits)


class TestWindowSearch:
    def test_planted_signal_found(self):
        ds = planted_window_dataset()
        res = window_grid_search(ds)
        assert res.best_window == pytest.approx((3.5, 3.7), abs=1e-9)
        assert res.best_statistic == "mean"
        assert res.best_abs_pearson > 0.99999
        assert res.best_abs_pearson == pytest.approx(
            max(abs(r) for (_w, _s, r) in res.full_grid)
        )

    def test_too_few_cells(self):
        ds = planted_window_dataset(n_cells=2)
        with pytest.raises(ValueError, match=">= 10"):
            window_grid_search(ds)

    def test_leakage_guard(self):
        ds = planted_window_dataset()
        tags = dict(ds.splits.tags)
        first = next(iter(tags))
        tags[first] = "test_high_dod"
        leaky = CurveDataset(voltage_grid=ds.voltage_grid, cells=ds.cells,
                             splits=SplitAssignment(tags))
        with pytest.raises(ValueError, match="leakage"):
            window_grid_search(leaky)

    def test_scale_equivariance(self):
        a = window_grid_search(planted_window_dataset(lifetime_scale=1.0))
        b = window_grid_search(planted_window_dataset(lifetime_scale=137.0))
        assert a.best_window == b.best_window
        assert a.best_abs_pearson == pytest.approx(b.best_abs_pearson, abs=1e-12)

    def test_lattice_and_min_width(self):
        ds = planted_window_dataset()
        res = window_grid_search(ds)
        for (lo, hi), _stat, _r in res.full_grid[:200]:
            assert hi - lo >= 0.02 - 1e-9
            assert abs(round((lo - 3.0) / 0.01) - (lo - 3.0) / 0.01) < 1e-9


class TestFullCatalog:
    def test_catalog_on_synth(self, synth_curves):
        dataset, result, truths = synth_curves
        cols = build_feature_columns(dataset)
        names = [c.name for c in cols]
        assert len(names) == len(set(names))
        for required in (
            "stress.avg", "cond.dod", "log_abs.mean.d_dqdv.w3-w0.3.60V-3.90V",
            "log_abs.var.d_q.w3-w0", "log_abs.d_cv_time.w3-w0", "log_abs.q.w0",
            "delta_q_dva1.w3-w0", "mean.d_dqdv.w3-w0.3.60V-3.90V",
            "log_abs.min.d_q.w3-w0",
        ):
            assert required in names
        labeled = [c.key for c in dataset.cells if c.lifetime_weeks is not None]
        matrix, _ = assemble_matrix(cols, cell_keys=labeled, policy="impute_median")
        assert matrix.values.shape[0] == len(labeled)

    def test_mid_window_feature_tracks_rate(self, synth_curves):
        dataset, result, truths = synth_curves
        cols = build_feature_columns(dataset)
        mid = next(c for c in cols if c.name == "log_abs.mean.d_dqdv.w3-w0.3.60V-3.90V")
        truth = {(t.group_id, t.cell_id): t.rate_mAh_per_week for t in truths}
        keys = sorted(mid.values)
        feat = np.array([mid.values[k] for k in keys])
        logk = np.log([truth[k] for k in keys])
        assert abs(pearson_r(feat, logk)) > 0.99
