"""Early-life feature catalog and the incremental-capacity window search.

All week-pair features accept any available (later, earlier) RPT pair and
default to weeks (3, 0).  Logged columns store log(|x| + eps); an exactly
zero input is flagged degenerate but still gets the log(eps) value so the
assembled matrix stays finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    CellKey,
    FeatureDescriptor,
    FeatureMatrix,
    TRAIN,
    canonical_feature_name,
)
from .curves import CurveDataset

LOG_EPS = 1e-12

DEFAULT_WEEK_PAIR = (3.0, 0.0)
DEFAULT_MID_WINDOW = (3.60, 3.90)
DEFAULT_WINDOWS = ((3.00, 3.60), (3.60, 3.90), (3.90, 4.20))

#: Transforms: value -> stored column entry.
FLAG_DEGENERATE = "degenerate_zero"
FLAG_MISSING_RPT = "missing_rpt"
FLAG_ABSENT_LANDMARK = "absent_landmark"
FLAG_NONPOSITIVE = "nonpositive_value"


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson linear correlation; NaN when either vector is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return float("nan")
    return float((xc @ yc) / denom)


def log_abs(x: float, eps: float = LOG_EPS) -> float:
    return math.log(abs(x) + eps)


@dataclass
class FeatureColumn:
    """One named feature column with per-cell values and quality flags."""

    name: str
    transform: str  # "identity" | "log_abs"
    values: dict[CellKey, float] = field(default_factory=dict)
    flags: dict[CellKey, str] = field(default_factory=dict)


def _column(descriptor: FeatureDescriptor) -> FeatureColumn:
    return FeatureColumn(
        name=canonical_feature_name(descriptor), transform=descriptor.transform
    )


def _put(col: FeatureColumn, key: CellKey, raw: Optional[float], eps: float = LOG_EPS) -> None:
    if raw is None:
        col.flags[key] = FLAG_MISSING_RPT
        return
    if col.transform == "log_abs":
        if raw == 0.0:
            col.flags[key] = FLAG_DEGENERATE
        col.values[key] = log_abs(raw, eps)
    else:
        col.values[key] = float(raw)


# ---------------------------------------------------------------------------
# Column extractors
# ---------------------------------------------------------------------------

def feature_delta_q_stats(
    dataset: CurveDataset, weeks: tuple[float, float] = DEFAULT_WEEK_PAIR
) -> list[FeatureColumn]:
    """log_abs mean and variance of the 1000-point dQ_{wj-wi}(V) difference."""
    j, i = weeks
    cols = [
        _column(FeatureDescriptor("qv_delta", transform="log_abs", stat="mean", weeks=weeks)),
        _column(FeatureDescriptor("qv_delta", transform="log_abs", stat="var", weeks=weeks)),
    ]
    for cell in dataset.cells:
        if j not in cell.qv or i not in cell.qv:
            for c in cols:
                c.flags[cell.key] = FLAG_MISSING_RPT
            continue
        delta = cell.qv[j] - cell.qv[i]
        _put(cols[0], cell.key, float(delta.mean()))
        _put(cols[1], cell.key, float(delta.var()))
    return cols


def feature_qv_delta_extra_stats(
    dataset: CurveDataset, weeks: tuple[float, float] = DEFAULT_WEEK_PAIR
) -> list[FeatureColumn]:
    """min/skew/kurtosis of dQ(V); used by the discharge-model replication."""
    j, i = weeks
    cols = [
        _column(FeatureDescriptor("qv_delta", transform="log_abs", stat="min", weeks=weeks)),
        _column(FeatureDescriptor("qv_delta", transform="identity", stat="skew", weeks=weeks)),
        _column(FeatureDescriptor("qv_delta", transform="identity", stat="kurtosis", weeks=weeks)),
    ]
    for cell in dataset.cells:
        if j not in cell.qv or i not in cell.qv:
            for c in cols:
                c.flags[cell.key] = FLAG_MISSING_RPT
            continue
        delta = cell.qv[j] - cell.qv[i]
        mu, sd = float(delta.mean()), float(delta.std())
        _put(cols[0], cell.key, float(delta.min()))
        if sd == 0.0:
            cols[1].values[cell.key] = 0.0
            cols[2].values[cell.key] = 0.0
            cols[1].flags[cell.key] = FLAG_DEGENERATE
            cols[2].flags[cell.key] = FLAG_DEGENERATE
        else:
            z = (delta - mu) / sd
            _put(cols[1], cell.key, float(np.mean(z**3)))
            _put(cols[2], cell.key, float(np.mean(z**4)))
    return cols


def _window_mask(grid: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    return (grid >= lo) & (grid <= hi)


def feature_dqdv_stats(
    dataset: CurveDataset,
    weeks: tuple[float, float] = DEFAULT_WEEK_PAIR,
    window: Optional[tuple[float, float]] = None,
    transforms: tuple[str, str] = ("log_abs", "log_abs"),
) -> list[FeatureColumn]:
    """Mean and variance of d(dQ/dV)_{wj-wi} over an optional voltage window."""
    j, i = weeks
    cols = [
        _column(FeatureDescriptor("dqdv_delta", transform=transforms[0], stat="mean",
                                  weeks=weeks, window=window)),
        _column(FeatureDescriptor("dqdv_delta", transform=transforms[1], stat="var",
                                  weeks=weeks, window=window)),
    ]
    mask = None if window is None else _window_mask(dataset.voltage_grid, window)
    for cell in dataset.cells:
        if j not in cell.dqdv or i not in cell.dqdv:
            for c in cols:
                c.flags[cell.key] = FLAG_MISSING_RPT
            continue
        delta = cell.dqdv[j] - cell.dqdv[i]
        if mask is not None:
            delta = delta[mask]
        _put(cols[0], cell.key, float(delta.mean()))
        _put(cols[1], cell.key, float(delta.var()))
    return cols


def feature_dqdv_window_stats(
    dataset: CurveDataset,
    weeks: tuple[float, float] = DEFAULT_WEEK_PAIR,
    windows: Sequence[tuple[float, float]] = DEFAULT_WINDOWS,
) -> list[FeatureColumn]:
    """Two columns (log_abs mean, log_abs var) per voltage window."""
    out: list[FeatureColumn] = []
    for w in windows:
        out.extend(feature_dqdv_stats(dataset, weeks, window=w))
    return out


def feature_cv_time(
    dataset: CurveDataset, weeks: tuple[float, float] = DEFAULT_WEEK_PAIR
) -> list[FeatureColumn]:
    """log CV hold time at each week of the pair plus log_abs of the change."""
    j, i = weeks
    col_i = _column(FeatureDescriptor("cv_time", transform="log_abs", week=i))
    col_j = _column(FeatureDescriptor("cv_time", transform="log_abs", week=j))
    col_d = _column(FeatureDescriptor("cv_time_delta", transform="log_abs", weeks=weeks))
    for cell in dataset.cells:
        cv = cell.cv_hold_seconds
        if i not in cv or j not in cv:
            for c in (col_i, col_j, col_d):
                c.flags[cell.key] = FLAG_MISSING_RPT
            continue
        for col, week in ((col_i, i), (col_j, j)):
            if cv[week] <= 0:
                col.flags[cell.key] = FLAG_NONPOSITIVE
                col.values[cell.key] = log_abs(cv[week])
            else:
                _put(col, cell.key, cv[week])
        _put(col_d, cell.key, cv[j] - cv[i])
    return [col_i, col_j, col_d]


def feature_capacity(
    dataset: CurveDataset,
    weeks: tuple[float, float] = DEFAULT_WEEK_PAIR,
    windows: Sequence[tuple[float, float]] = DEFAULT_WINDOWS,
) -> list[FeatureColumn]:
    """Initial capacity, per-window week-i capacities, and total fade."""
    j, i = weeks
    col_q0 = _column(FeatureDescriptor("capacity", transform="log_abs", week=i))
    win_cols = [
        _column(FeatureDescriptor("capacity", transform="log_abs", week=i, window=w))
        for w in windows
    ]
    col_fade = _column(FeatureDescriptor("capacity_delta", transform="log_abs", weeks=weeks))
    grid = dataset.voltage_grid
    for cell in dataset.cells:
        if i not in cell.full_capacity_mAh or j not in cell.full_capacity_mAh:
            for c in [col_q0, col_fade, *win_cols]:
                c.flags[cell.key] = FLAG_MISSING_RPT
            continue
        _put(col_q0, cell.key, cell.full_capacity_mAh[i])
        _put(col_fade, cell.key, cell.full_capacity_mAh[j] - cell.full_capacity_mAh[i])
        qv = cell.qv.get(i)
        for col, (lo, hi) in zip(win_cols, windows):
            if qv is None:
                col.flags[cell.key] = FLAG_MISSING_RPT
                continue
            # capacity discharged between hi and lo volts (Q decreases with V)
            q_win = float(np.interp(lo, grid, qv) - np.interp(hi, grid, qv))
            _put(col, cell.key, q_win)
    return [col_q0, *win_cols, col_fade]


def feature_dva(
    dataset: CurveDataset, weeks: tuple[float, float] = DEFAULT_WEEK_PAIR
) -> list[FeatureColumn]:
    """dQ^{DVA,k}_{wj-wi} for the four capacity landmarks (identity transform)."""
    j, i = weeks
    cols = [
        _column(FeatureDescriptor("dva_capacity_delta", index=k, weeks=weeks))
        for k in (1, 2, 3, 4)
    ]
    for cell in dataset.cells:
        if j not in cell.dva or i not in cell.dva:
            for c in cols:
                c.flags[cell.key] = FLAG_MISSING_RPT
            continue
        lm_j = cell.dva[j].as_tuple()
        lm_i = cell.dva[i].as_tuple()
        for col, a, b in zip(cols, lm_j, lm_i):
            if a is None or b is None:
                col.flags[cell.key] = FLAG_ABSENT_LANDMARK
            else:
                _put(col, cell.key, a - b)
    return cols


def stress_values(c_chg: float, c_dis: float, dod: float) -> dict[str, float]:
    chg = math.sqrt(c_chg * dod)
    dchg = math.sqrt(c_dis * dod)
    return {
        "chg": chg,
        "dchg": dchg,
        "avg": 0.5 * (chg + dchg),
        "mult": chg * dchg,
    }


def feature_stress(dataset: CurveDataset) -> list[FeatureColumn]:
    """Diffusion-stress proxies plus the raw protocol parameters.

    DoD is the measured value from the first cycling week throughout.
    """
    stress_cols = {
        v: _column(FeatureDescriptor("stress", variant=v)) for v in ("chg", "dchg", "avg", "mult")
    }
    cond_cols = {
        v: _column(FeatureDescriptor("condition", variant=v)) for v in ("c_chg", "c_dis", "dod")
    }
    for cell in dataset.cells:
        cond = cell.condition
        s = stress_values(cond.c_chg, cond.c_dis, cond.dod_measured)
        for v, col in stress_cols.items():
            _put(col, cell.key, s[v])
        _put(cond_cols["c_chg"], cell.key, cond.c_chg)
        _put(cond_cols["c_dis"], cell.key, cond.c_dis)
        _put(cond_cols["dod"], cell.key, cond.dod_measured)
    return [*stress_cols.values(), *cond_cols.values()]


def build_feature_columns(
    dataset: CurveDataset,
    weeks: tuple[float, float] = DEFAULT_WEEK_PAIR,
    windows: Sequence[tuple[float, float]] = DEFAULT_WINDOWS,
    mid_window: Optional[tuple[float, float]] = None,
    include_raw_mid: bool = True,
    include_discharge_extras: bool = True,
) -> list[FeatureColumn]:
    """The full catalog at one week pair.

    ``mid_window`` names which of ``windows`` is the optimized one (default:
    the second of three).  ``include_raw_mid`` adds an untransformed copy of
    its d(dQ/dV) mean (the scatter-plot axis is sometimes wanted raw);
    ``include_discharge_extras`` adds the min/skew/kurtosis dQ(V) stats the
    discharge-model replication needs.
    """
    if mid_window is None:
        mid_window = windows[1] if len(windows) >= 2 else DEFAULT_MID_WINDOW
    cols: list[FeatureColumn] = []
    cols.extend(feature_stress(dataset))
    cols.extend(feature_dqdv_stats(dataset, weeks))  # full-range mean/var
    cols.extend(feature_dqdv_window_stats(dataset, weeks, windows))
    cols.extend(feature_delta_q_stats(dataset, weeks))
    cols.extend(feature_cv_time(dataset, weeks))
    cols.extend(feature_capacity(dataset, weeks, windows))
    cols.extend(feature_dva(dataset, weeks))
    if include_raw_mid:
        raw = feature_dqdv_stats(dataset, weeks, window=mid_window,
                                 transforms=("identity", "identity"))
        cols.append(raw[0])
    if include_discharge_extras:
        cols.extend(feature_qv_delta_extra_stats(dataset, weeks))
    return cols


# ---------------------------------------------------------------------------
# Matrix assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssemblyReport:
    dropped_cells: tuple[CellKey, ...]
    imputed: tuple[tuple[CellKey, str], ...]  # (cell, feature name)


def assemble_matrix(
    columns: Sequence[FeatureColumn],
    cell_keys: Optional[Sequence[CellKey]] = None,
    policy: str = "drop",
) -> tuple[FeatureMatrix, AssemblyReport]:
    """Align columns into a cells x features matrix.

    policy="drop" removes cells with any missing entry in the requested
    columns; policy="impute_median" fills missing entries with the column
    median over cells that do have the value.  Degenerate-zero log_abs
    entries are already stored as log(eps) and are kept either way.
    """
    if policy not in ("drop", "impute_median"):
        raise ValueError(f"unknown imputation policy {policy!r}")
    if cell_keys is None:
        keys: set[CellKey] = set()
        for col in columns:
            keys.update(col.values.keys())
            keys.update(col.flags.keys())
        cell_keys = sorted(keys)
    else:
        cell_keys = [tuple(k) for k in cell_keys]
    if not cell_keys:
        raise ValueError("no cells to assemble")

    names = [c.name for c in columns]
    if len(set(names)) != len(names):
        raise ValueError("duplicate feature column names")

    medians = {}
    for col in columns:
        have = [col.values[k] for k in cell_keys if k in col.values]
        medians[col.name] = float(np.median(have)) if have else math.nan

    rows: list[list[float]] = []
    kept: list[CellKey] = []
    dropped: list[CellKey] = []
    imputed: list[tuple[CellKey, str]] = []
    for key in cell_keys:
        row = []
        missing = []
        for col in columns:
            if key in col.values:
                row.append(col.values[key])
            else:
                missing.append(col.name)
                row.append(medians[col.name])
        if missing and policy == "drop":
            dropped.append(key)
            continue
        if missing:
            if any(math.isnan(x) for x in row):
                dropped.append(key)  # nothing to impute from
                continue
            imputed.extend((key, name) for name in missing)
        kept.append(key)
        rows.append(row)
    if not kept:
        raise ValueError("all cells dropped during assembly; no overlap between columns")

    matrix = FeatureMatrix(
        feature_names=tuple(names),
        values=np.asarray(rows, dtype=float),
        cell_keys=tuple(kept),
        transforms=tuple(c.transform for c in columns),
    )
    return matrix, AssemblyReport(dropped_cells=tuple(dropped), imputed=tuple(imputed))


# ---------------------------------------------------------------------------
# Exhaustive voltage-window search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSearchResult:
    best_window: tuple[float, float]
    best_statistic: str  # "mean" | "var"
    best_abs_pearson: float
    full_grid: tuple[tuple[tuple[float, float], str, float], ...]  # (window, stat, r)


def window_grid_search(
    dataset: CurveDataset,
    weeks: tuple[float, float] = DEFAULT_WEEK_PAIR,
    lattice_step: float = 0.01,
    min_width: float = 0.02,
    statistics: Sequence[str] = ("mean", "var"),
    eps: float = LOG_EPS,
    require_train_only: bool = True,
) -> WindowSearchResult:
    """Search every (v_lo, v_hi) window on the 0.01 V lattice for the
    log_abs window statistic of d(dQ/dV) best correlated with log lifetime.

    Ties break toward the wider window, then the lower v_lo, then the mean
    statistic.  Only training cells may be passed in; windows where the
    feature column is constant are skipped (correlation undefined).
    """
    cells = dataset.cells
    if require_train_only and dataset.splits is not None:
        bad = [c.key for c in cells if dataset.splits.tags.get(c.key) != TRAIN]
        if bad:
            raise ValueError(f"window search fed non-train cells (leakage): {bad[:5]}")
    j, i = weeks
    usable = [
        c for c in cells
        if c.lifetime_weeks is not None and j in c.dqdv and i in c.dqdv
    ]
    if len(usable) < 10:
        raise ValueError(f"window search needs >= 10 cells with lifetimes, got {len(usable)}")

    grid = dataset.voltage_grid
    delta = np.stack([c.dqdv[j] - c.dqdv[i] for c in usable])  # cells x grid
    log_life = np.log([c.lifetime_weeks for c in usable])
    yc = log_life - log_life.mean()
    y_ss = float(yc @ yc)

    # Cumulative sums let every window statistic come from two lookups.
    cum1 = np.concatenate([np.zeros((delta.shape[0], 1)), np.cumsum(delta, axis=1)], axis=1)
    cum2 = np.concatenate([np.zeros((delta.shape[0], 1)), np.cumsum(delta**2, axis=1)], axis=1)

    n_steps = int(round((grid[-1] - grid[0]) / lattice_step))
    lattice = grid[0] + lattice_step * np.arange(n_steps + 1)
    min_steps = int(round(min_width / lattice_step))

    pairs = [
        (lo_i, hi_i)
        for lo_i in range(len(lattice))
        for hi_i in range(lo_i + min_steps, len(lattice))
    ]
    lo_v = np.array([lattice[a] for a, _ in pairs])
    hi_v = np.array([lattice[b] for _, b in pairs])
    # grid indices covering [lo, hi] inclusive (tolerance for float lattice)
    lo_idx = np.searchsorted(grid, lo_v - 1e-12, side="left")
    hi_idx = np.searchsorted(grid, hi_v + 1e-12, side="right")
    counts = (hi_idx - lo_idx).astype(float)

    full_grid: list[tuple[tuple[float, float], str, float]] = []
    # |r| ties at float precision break toward the wider window, then the
    # lower v_lo, then the mean statistic.
    r_tol = 1e-10
    best = None  # (abs_r, (width, -v_lo, stat_pref), window, stat, r)
    for stat in statistics:
        means = (cum1[:, hi_idx] - cum1[:, lo_idx]) / counts
        if stat == "mean":
            feat = means
        elif stat == "var":
            ex2 = (cum2[:, hi_idx] - cum2[:, lo_idx]) / counts
            feat = np.maximum(ex2 - means**2, 0.0)
        else:
            raise ValueError(f"unknown statistic {stat!r}")
        feat = np.log(np.abs(feat) + eps)  # cells x windows
        fc = feat - feat.mean(axis=0)
        f_ss = np.einsum("ij,ij->j", fc, fc)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = (yc @ fc) / np.sqrt(f_ss * y_ss)
        for w_i in range(len(pairs)):
            window = (float(lo_v[w_i]), float(hi_v[w_i]))
            if f_ss[w_i] <= 0 or not np.isfinite(r[w_i]):
                continue  # constant column: correlation undefined
            r_w = float(r[w_i])
            full_grid.append((window, stat, r_w))
            tiebreak = (window[1] - window[0], -window[0], 1 if stat == "mean" else 0)
            if (
                best is None
                or abs(r_w) > best[0] + r_tol
                or (abs(r_w) >= best[0] - r_tol and tiebreak > best[1])
            ):
                best = (abs(r_w), tiebreak, window, stat, r_w)
    if best is None:
        raise ValueError("every candidate window produced a constant feature column")
    _, _, window, stat, r_w = best
    return WindowSearchResult(
        best_window=window,
        best_statistic=stat,
        best_abs_pearson=abs(r_w),
        full_grid=tuple(full_grid),
    )


def windows_from_search(best_window: tuple[float, float]) -> tuple[tuple[float, float], ...]:
    """Flank the optimized window with the remaining voltage ranges."""
    lo, hi = best_window
    out = []
    if lo > 3.0:
        out.append((3.00, round(lo, 2)))
    out.append((round(lo, 2), round(hi, 2)))
    if hi < 4.2:
        out.append((round(hi, 2), 4.20))
    return tuple(out)
