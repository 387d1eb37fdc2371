"""Evaluation metrics, model-comparison tables, and plot-ready data files.

All metrics are computed on linear-week lifetimes even though the models
regress on the log scale.  Output files are deterministic: fixed column
order, fixed float formatting, rows sorted by key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import CellKey, SPLIT_TAGS
from .selection import SelectionTrace


def mape(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    """Mean absolute percentage error, in percent."""
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.shape != p.shape or y.size == 0:
        raise ValueError("y_true and y_pred must be non-empty and equal length")
    if np.any(y <= 0):
        raise ValueError("MAPE undefined for non-positive true lifetimes")
    return float(np.mean(np.abs((y - p) / y)) * 100.0)


def rmse(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.shape != p.shape or y.size == 0:
        raise ValueError("y_true and y_pred must be non-empty and equal length")
    return float(np.sqrt(np.mean((y - p) ** 2)))


@dataclass(frozen=True)
class MetricsRow:
    model: str
    n_features: int
    mape_by_split: Mapping[str, Optional[float]]  # split tag -> % (None = absent)
    rmse_by_split: Mapping[str, Optional[float]]


@dataclass(frozen=True)
class ModelPredictions:
    """Per-split true and predicted lifetimes (weeks) for one trained model."""

    model: str
    n_features: int
    by_split: Mapping[str, tuple[np.ndarray, np.ndarray]]  # tag -> (y_true, y_pred)


def comparison_table(predictions: Sequence[ModelPredictions]) -> list[MetricsRow]:
    rows = []
    for mp in predictions:
        m: dict[str, Optional[float]] = {}
        r: dict[str, Optional[float]] = {}
        for tag in SPLIT_TAGS:
            pair = mp.by_split.get(tag)
            if pair is None or len(pair[0]) == 0:
                m[tag] = None
                r[tag] = None
            else:
                m[tag] = mape(pair[0], pair[1])
                r[tag] = rmse(pair[0], pair[1])
        rows.append(MetricsRow(model=mp.model, n_features=mp.n_features,
                               mape_by_split=m, rmse_by_split=r))
    return rows


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6g}"


def write_comparison_csv(
    rows: Sequence[MetricsRow], path: Path | str, provenance: str = ""
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if provenance:
        lines.append(f"# {provenance}")
    header = ["model", "n_features"]
    for tag in SPLIT_TAGS:
        header.append(f"mape_{tag}_pct")
    for tag in SPLIT_TAGS:
        header.append(f"rmse_{tag}_weeks")
    lines.append(",".join(header))
    for row in rows:
        cells = [row.model, str(row.n_features)]
        cells += [_fmt(row.mape_by_split[t]) for t in SPLIT_TAGS]
        cells += [_fmt(row.rmse_by_split[t]) for t in SPLIT_TAGS]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Plot-ready data files
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], provenance: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if provenance:
        lines.append(f"# {provenance}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(
            f"{v:.8g}" if isinstance(v, float) else str(v) for v in row
        ))
    path.write_text("\n".join(lines) + "\n")


def emit_lifetime_histogram(
    lifetimes: Mapping[CellKey, float],
    splits: Mapping[CellKey, str],
    path: Path | str,
    n_bins: int = 20,
    provenance: str = "",
) -> None:
    """Histogram bins span the observed lifetime range; one count column per split."""
    values = np.array([lifetimes[k] for k in sorted(lifetimes)])
    edges = np.histogram_bin_edges(values, bins=n_bins)
    rows = []
    tags = list(SPLIT_TAGS)
    counts = {
        t: np.histogram(
            [v for k, v in lifetimes.items() if splits.get(k) == t], bins=edges
        )[0]
        for t in tags
    }
    total = np.histogram(values, bins=edges)[0]
    for i in range(len(edges) - 1):
        rows.append([float(edges[i]), float(edges[i + 1]), int(total[i])]
                    + [int(counts[t][i]) for t in tags])
    _write_csv(Path(path), ["bin_lo_weeks", "bin_hi_weeks", "count"]
               + [f"count_{t}" for t in tags], rows, provenance)


def emit_feature_scatter(
    feature_name: str,
    feature_values: Mapping[CellKey, float],
    lifetimes: Mapping[CellKey, float],
    splits: Mapping[CellKey, str],
    path: Path | str,
    provenance: str = "",
) -> None:
    rows = []
    for key in sorted(feature_values):
        if key not in lifetimes:
            continue
        rows.append([
            f"G{key[0]}C{key[1]}",
            float(feature_values[key]),
            float(lifetimes[key]),
            splits.get(key, ""),
        ])
    _write_csv(Path(path), ["cell", "feature_value", "lifetime_weeks", "split"], rows, provenance)


def emit_selection_trace(trace: SelectionTrace, path: Path | str, provenance: str = "") -> None:
    rows = [
        [step + 1, s.feature, float(s.cv_rmse_mean), float(s.cv_rmse_std)]
        for step, s in enumerate(trace.steps)
    ]
    _write_csv(Path(path), ["step", "feature", "cv_rmse_mean", "cv_rmse_std"], rows, provenance)


def emit_pred_vs_true(
    preds: Mapping[CellKey, float],
    lifetimes: Mapping[CellKey, float],
    splits: Mapping[CellKey, str],
    path: Path | str,
    provenance: str = "",
) -> None:
    rows = []
    for key in sorted(preds):
        if key not in lifetimes:
            continue
        t, p = float(lifetimes[key]), float(preds[key])
        rows.append([f"G{key[0]}C{key[1]}", splits.get(key, ""), t, p, p - t])
    _write_csv(
        Path(path),
        ["cell", "split", "true_weeks", "pred_weeks", "residual_weeks"],
        rows,
        provenance,
    )


def emit_hbm_intervals(
    intervals: Mapping[CellKey, tuple[int, float, float, float]],
    lifetimes: Mapping[CellKey, float],
    path: Path | str,
    provenance: str = "",
) -> None:
    """Rows: cell, cluster, pred_mean, pred_lo, pred_hi, true."""
    rows = []
    for key in sorted(intervals):
        cluster, mean, lo, hi = intervals[key]
        rows.append([
            f"G{key[0]}C{key[1]}", int(cluster), float(mean), float(lo), float(hi),
            float(lifetimes.get(key, float("nan"))),
        ])
    _write_csv(
        Path(path),
        ["cell", "cluster", "pred_mean", "pred_lo", "pred_hi", "true"],
        rows,
        provenance,
    )


def write_json(obj, path: Path | str, provenance: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(obj)
    if provenance:
        payload["_provenance"] = provenance
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Time-dependence sweep over RPT week pairs
# ---------------------------------------------------------------------------

def default_pair_features(dataset, weeks, mid_window=(3.60, 3.90)):
    """The two-feature set used by the sweep: mid-window d(dQ/dV) mean and
    the CV-hold-time change, both at the given week pair."""
    from .features import feature_cv_time, feature_dqdv_stats

    dqdv_cols = feature_dqdv_stats(dataset, weeks, window=mid_window)
    cv_cols = feature_cv_time(dataset, weeks)
    return [dqdv_cols[0], cv_cols[2]]


@dataclass(frozen=True)
class SweepRow:
    week_i: float
    week_j: float
    status: str  # "ok" or the skip reason
    mape_high: Optional[float] = None
    rmse_high: Optional[float] = None
    mape_low: Optional[float] = None
    rmse_low: Optional[float] = None


def week_pair_sweep(
    dataset,
    pairs: Sequence[tuple[float, float]],
    lifetimes: Mapping[CellKey, float],
    seed: int = 0,
    mid_window: tuple[float, float] = (3.60, 3.90),
    feature_builder=None,
    tune_kwargs: Optional[dict] = None,
) -> list[SweepRow]:
    """Re-extract the two-feature set at each (earlier, later) week pair and
    retrain the elastic net; pairs whose weeks no cell recorded are skipped
    with a notation instead of failing the grid.
    """
    from .core import TEST_HIGH_DOD, TEST_LOW_DOD, TRAIN
    from .features import assemble_matrix
    from .regress import fit_tuned_elastic_net, predict_matrix

    if dataset.splits is None:
        raise ValueError("sweep needs split assignments on the curve dataset")
    if feature_builder is None:
        feature_builder = lambda ds, weeks: default_pair_features(ds, weeks, mid_window)
    tune_kwargs = dict(tune_kwargs or {})

    rows: list[SweepRow] = []
    for wi, wj in pairs:
        if wi >= wj:
            rows.append(SweepRow(wi, wj, "skipped: pair not increasing"))
            continue
        have = [c for c in dataset.cells if wi in c.qv and wj in c.qv]
        if not have:
            rows.append(SweepRow(wi, wj, f"skipped: no cell has RPTs at weeks {wi:g} and {wj:g}"))
            continue
        cols = feature_builder(dataset, (wj, wi))
        matrix, _rep = assemble_matrix(cols, policy="drop")
        keys = [k for k in matrix.cell_keys if k in lifetimes]
        matrix = matrix.restrict(keys)
        tags = {k: dataset.splits.tags.get(k) for k in matrix.cell_keys}
        train_keys = [k for k in matrix.cell_keys if tags[k] == TRAIN]
        if len(train_keys) < 10:
            rows.append(SweepRow(wi, wj, f"skipped: only {len(train_keys)} train cells"))
            continue
        train = matrix.restrict(train_keys)
        y_log = np.log([lifetimes[k] for k in train.cell_keys])
        groups = [k[0] for k in train.cell_keys]
        fit, _tune = fit_tuned_elastic_net(
            train, train.feature_names, y_log, groups, seed=seed, **tune_kwargs
        )
        metrics: dict[str, tuple[Optional[float], Optional[float]]] = {}
        for tag in (TEST_HIGH_DOD, TEST_LOW_DOD):
            test_keys = [k for k in matrix.cell_keys if tags[k] == tag]
            if not test_keys:
                metrics[tag] = (None, None)
                continue
            sub = matrix.restrict(test_keys)
            pred = predict_matrix(fit, sub)
            truth = np.array([lifetimes[k] for k in sub.cell_keys])
            metrics[tag] = (mape(truth, pred), rmse(truth, pred))
        rows.append(
            SweepRow(
                wi, wj, "ok",
                mape_high=metrics[TEST_HIGH_DOD][0], rmse_high=metrics[TEST_HIGH_DOD][1],
                mape_low=metrics[TEST_LOW_DOD][0], rmse_low=metrics[TEST_LOW_DOD][1],
            )
        )
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: Path | str, provenance: str = "") -> None:
    out = []
    for r in rows:
        out.append([
            f"{r.week_i:g}", f"{r.week_j:g}", r.status,
            _fmt(r.mape_high), _fmt(r.rmse_high), _fmt(r.mape_low), _fmt(r.rmse_low),
        ])
    _write_csv(
        Path(path),
        ["week_i", "week_j", "status",
         "mape_test_high_dod_pct", "rmse_test_high_dod_weeks",
         "mape_test_low_dod_pct", "rmse_test_low_dod_weeks"],
        out,
        provenance,
    )
