"""Resampled Q(V) curves and their derivative forms.

The discharge samples of each RPT are fit with a cubic smoothing spline and
evaluated on the fixed global voltage grid, which makes all later curve
arithmetic pointwise.  Differentiation uses central difference quotients on
the grid (one-sided at the ends).  Differential voltage dV/dQ lives on each
cell's own capacity support, which changes week to week as capacity fades.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import interpolate, signal

from .core import (
    CellKey,
    CellRecord,
    CyclingCondition,
    QvCurve,
    SplitAssignment,
    VOLTAGE_MAX_V,
    VOLTAGE_MIN_V,
    _freeze,
    default_voltage_grid,
)

MIN_RAW_POINTS = 50
MIN_RAW_SPAN_V = 1.1


@dataclass(frozen=True)
class IcaCurve:
    """Incremental capacity dQ/dV on the shared voltage grid (mAh/V).

    With capacity measured as discharged capacity, dQ/dV is negative and the
    electrochemical "peaks" appear as dips; features difference these curves
    pointwise so the sign convention cancels out of |.|-based statistics.
    """

    voltage_grid: np.ndarray
    dqdv: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "voltage_grid", _freeze(self.voltage_grid))
        object.__setattr__(self, "dqdv", _freeze(self.dqdv))
        if self.voltage_grid.shape != self.dqdv.shape or self.voltage_grid.ndim != 1:
            raise ValueError("voltage_grid and dqdv must be 1-D arrays of equal length")
        if not np.all(np.isfinite(self.dqdv)):
            raise ValueError("dqdv contains non-finite values")


@dataclass(frozen=True)
class DvaCurve:
    """Differential voltage dV/dQ on the cell's own capacity support (V/mAh)."""

    capacity_grid: np.ndarray
    dvdq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "capacity_grid", _freeze(self.capacity_grid))
        object.__setattr__(self, "dvdq", _freeze(self.dvdq))
        if self.capacity_grid.shape != self.dvdq.shape or self.capacity_grid.ndim != 1:
            raise ValueError("capacity_grid and dvdq must be 1-D arrays of equal length")
        if np.any(np.diff(self.capacity_grid) <= 0):
            raise ValueError("capacity_grid must be strictly increasing")


@dataclass(frozen=True)
class DeltaCurve:
    """Pointwise difference of two same-kind curves, tagged with the week pair."""

    grid: np.ndarray
    values: np.ndarray
    weeks: Optional[tuple[float, float]] = None  # (later j, earlier i)
    kind: str = "qv"  # "qv" | "ica"

    def __post_init__(self):
        object.__setattr__(self, "grid", _freeze(self.grid))
        object.__setattr__(self, "values", _freeze(self.values))


def estimate_noise_std(y: np.ndarray) -> float:
    """Noise scale from second differences of an (approximately) smooth series.

    The filter 0.5*y[i-1] - y[i] + 0.5*y[i+1] annihilates linear trend and
    has variance 1.5*sigma^2 under iid noise.
    """
    y = np.asarray(y, dtype=float)
    if y.size < 3:
        return 0.0
    d = 0.5 * y[:-2] - y[1:-1] + 0.5 * y[2:]
    return float(np.sqrt(np.mean(d**2) / 1.5))


def _clean_xy(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort by x and average y over duplicate x values (splrep needs strict order)."""
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    ux, inv = np.unique(x, return_inverse=True)
    if ux.size == x.size:
        return x, y
    sums = np.zeros_like(ux)
    counts = np.zeros_like(ux)
    np.add.at(sums, inv, y)
    np.add.at(counts, inv, 1.0)
    return ux, sums / counts


def _discrepancy_lambda(x: np.ndarray, y: np.ndarray) -> float:
    """Roughness penalty chosen so the fit's residual sum of squares matches
    the difference-based noise estimate (discrepancy principle).

    Noiseless data drives the penalty toward interpolation; the bisection
    stops once the residual is within a factor of the target, since the
    derivative error is flat over small penalty changes.
    """
    n = x.size
    target = n * estimate_noise_std(y) ** 2
    if target <= 0:
        return 0.0
    lo, hi = 1e-12, 1e4
    lam = math.sqrt(lo * hi)
    for _ in range(40):
        lam = math.sqrt(lo * hi)
        spl = interpolate.make_smoothing_spline(x, y, lam=lam)
        ssr = float(np.sum((spl(x) - y) ** 2))
        if 0.98 * target <= ssr <= 1.02 * target:
            break
        if ssr > target:
            hi = lam
        else:
            lo = lam
    return lam


def _fit_spline(x: np.ndarray, y: np.ndarray, smoothing: Optional[float]):
    """Cubic spline fit; returns (value, derivative) callables.

    smoothing=None picks the roughness penalty by the discrepancy principle;
    an explicit value is the classic residual budget (scipy splrep ``s``),
    with 0 giving plain interpolation.
    """
    try:
        if smoothing is None:
            spl = interpolate.make_smoothing_spline(x, y, lam=_discrepancy_lambda(x, y))
            return spl, spl.derivative()
        tck = interpolate.splrep(x, y, k=3, s=smoothing)
        return (
            lambda t: interpolate.splev(t, tck),
            lambda t: interpolate.splev(t, tck, der=1),
        )
    except Exception as exc:  # solver failures surface as generic errors
        cond = f"n={x.size}, span={x.max() - x.min():.4g}, s={smoothing!r}"
        raise RuntimeError(f"spline solve failed ({cond}): {exc}") from exc


def resample_qv(
    samples: np.ndarray,
    grid: Optional[np.ndarray] = None,
    smoothing: Optional[float] = None,
) -> QvCurve:
    """Fit a cubic smoothing spline to raw (V, Q) discharge points.

    ``samples`` is an (n, >=2) array whose first two columns are voltage and
    capacity.  ``smoothing`` is the spline residual budget (scipy's ``s``);
    None picks it from a difference-based noise estimate, 0 interpolates.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] < 2:
        raise ValueError("samples must be an (n, >=2) array of (voltage, capacity)")
    v, q = _clean_xy(samples[:, 0], samples[:, 1])
    if v.size < MIN_RAW_POINTS:
        raise ValueError(f"need >= {MIN_RAW_POINTS} raw points, got {v.size}")
    if v.max() - v.min() < MIN_RAW_SPAN_V:
        raise ValueError(
            f"raw voltage span {v.max() - v.min():.3f} V < {MIN_RAW_SPAN_V} V"
        )
    if grid is None:
        grid = default_voltage_grid()
    f, _df = _fit_spline(v, q, smoothing)
    return QvCurve(voltage_grid=grid, capacity=f(grid))


def compute_dqdv(curve: QvCurve) -> IcaCurve:
    """Difference-quotient derivative of Q(V): central in the interior, one-sided at ends."""
    dqdv = np.gradient(curve.capacity, curve.voltage_grid)
    return IcaCurve(voltage_grid=curve.voltage_grid, dqdv=dqdv)


def compute_dvdq(
    samples: np.ndarray,
    n_points: int = 1000,
    smoothing: Optional[float] = None,
    monotone_drop_frac: float = 0.05,
) -> DvaCurve:
    """Differential voltage dV/dQ over the cell's capacity support.

    Sample order is normalized (flipped if capacity runs backwards); small
    non-monotone stretches from tester noise are dropped, but if more than
    ``monotone_drop_frac`` of the points have to go the data is rejected.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] < 2:
        raise ValueError("samples must be an (n, >=2) array of (voltage, capacity)")
    v, q = samples[:, 0], samples[:, 1]
    if q[-1] < q[0]:
        v, q = v[::-1], q[::-1]
    # Flat stretches (testers integrate current, so repeated readings are
    # common) are deduplicated silently; only strict decreases count as
    # inversions against the monotone budget.
    tol = 1e-9 * max(abs(float(q.max())), 1.0)
    inversions = int(np.sum(np.diff(q) < -tol))
    if inversions > monotone_drop_frac * q.size:
        raise ValueError(
            f"capacity not monotone along discharge: {inversions}/{q.size} inversions"
        )
    keep = np.ones(q.size, dtype=bool)
    running = q[0]
    for i in range(1, q.size):
        if q[i] > running + tol:
            running = q[i]
        else:
            keep[i] = False
    q, v = q[keep], v[keep]
    if q.size < MIN_RAW_POINTS:
        raise ValueError(f"need >= {MIN_RAW_POINTS} clean points, got {q.size}")
    _f, df = _fit_spline(q, v, smoothing)
    qgrid = np.linspace(q.min(), q.max(), n_points)
    return DvaCurve(capacity_grid=qgrid, dvdq=df(qgrid))


def delta_curve(a, b, weeks: Optional[tuple[float, float]] = None) -> DeltaCurve:
    """Pointwise a - b for two QvCurves or two IcaCurves on the same grid."""
    if isinstance(a, QvCurve) and isinstance(b, QvCurve):
        ga, gb, ya, yb, kind = a.voltage_grid, b.voltage_grid, a.capacity, b.capacity, "qv"
    elif isinstance(a, IcaCurve) and isinstance(b, IcaCurve):
        ga, gb, ya, yb, kind = a.voltage_grid, b.voltage_grid, a.dqdv, b.dqdv, "ica"
    else:
        raise TypeError(f"cannot difference {type(a).__name__} and {type(b).__name__}")
    if ga.shape != gb.shape or not np.array_equal(ga, gb):
        raise ValueError("curves are not on the same voltage grid")
    return DeltaCurve(grid=ga, values=ya - yb, weeks=weeks, kind=kind)


# ---------------------------------------------------------------------------
# DVA capacity landmarks
# ---------------------------------------------------------------------------

#: Landmark search windows as fractions of the capacity support, and whether
#: the landmark is a peak or a valley of |dV/dQ|.  Peaks of |dV/dQ| sit at
#: phase-transition boundaries (the anode/cathode peaks); valleys sit inside
#: the plateaus and serve as the anode-/cathode-region capacity markers.
DVA_LANDMARK_WINDOWS: tuple[tuple[str, float, float, str], ...] = (
    ("anode_peak", 0.02, 0.50, "peak"),
    ("cathode_region", 0.50, 0.98, "valley"),
    ("anode_region", 0.02, 0.50, "valley"),
    ("cathode_peak", 0.50, 0.98, "peak"),
)


@dataclass(frozen=True)
class DvaLandmarks:
    """Capacities (mAh) of the four DVA landmarks; None where not found."""

    q1: Optional[float]  # anode peak
    q2: Optional[float]  # cathode-region capacity
    q3: Optional[float]  # anode-region capacity
    q4: Optional[float]  # cathode peak

    def as_tuple(self) -> tuple[Optional[float], ...]:
        return (self.q1, self.q2, self.q3, self.q4)


def find_dva_peaks(
    curve: DvaCurve,
    windows: Sequence[tuple[str, float, float, str]] = DVA_LANDMARK_WINDOWS,
    min_prominence_frac: float = 0.02,
) -> DvaLandmarks:
    """Locate the four DVA capacity landmarks by prominence-ranked extrema.

    Works on |dV/dQ| so charge/discharge sign conventions do not matter.
    A landmark whose window contains no sufficiently prominent extremum is
    reported as None rather than raising.
    """
    mag = np.abs(curve.dvdq)
    q = curve.capacity_grid
    span = mag.max() - mag.min()
    if span <= 0:
        return DvaLandmarks(None, None, None, None)
    prominence = min_prominence_frac * span

    peak_idx, peak_props = signal.find_peaks(mag, prominence=prominence)
    valley_idx, valley_props = signal.find_peaks(-mag, prominence=prominence)

    q_lo, q_hi = q[0], q[-1]
    support = q_hi - q_lo
    found: list[Optional[float]] = []
    for _name, f_lo, f_hi, kind in windows:
        lo, hi = q_lo + f_lo * support, q_lo + f_hi * support
        idx, props = (peak_idx, peak_props) if kind == "peak" else (valley_idx, valley_props)
        mask = (q[idx] >= lo) & (q[idx] <= hi)
        if not mask.any():
            found.append(None)
            continue
        cand_idx = idx[mask]
        cand_prom = props["prominences"][mask]
        found.append(float(q[cand_idx[np.argmax(cand_prom)]]))
    return DvaLandmarks(*found)


# ---------------------------------------------------------------------------
# Per-cell curve container handed to the feature stage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellCurveData:
    """Everything the feature stage needs for one cell, raw samples dropped."""

    key: CellKey
    condition: CyclingCondition
    lifetime_weeks: Optional[float]
    qv: Mapping[float, np.ndarray]          # week -> capacity on the shared grid
    dqdv: Mapping[float, np.ndarray]        # week -> dQ/dV on the shared grid
    dva: Mapping[float, DvaLandmarks]
    cv_hold_seconds: Mapping[float, float]
    full_capacity_mAh: Mapping[float, float]

    @property
    def weeks(self) -> tuple[float, ...]:
        return tuple(sorted(self.qv.keys()))


@dataclass(frozen=True)
class CurveDataset:
    voltage_grid: np.ndarray
    cells: tuple[CellCurveData, ...]
    splits: Optional[SplitAssignment] = None

    def cell(self, key: CellKey) -> CellCurveData:
        for c in self.cells:
            if c.key == tuple(key):
                return c
        raise KeyError(f"no such cell: {key}")


def build_curve_dataset(
    cells: Sequence[CellRecord],
    splits: Optional[SplitAssignment] = None,
    grid_points: int = 1000,
    smoothing: Optional[float] = None,
) -> CurveDataset:
    """Resample every cell's RPT discharges and precompute derivative curves."""
    grid = default_voltage_grid(grid_points)
    out = []
    for cell in sorted(cells, key=lambda c: c.key):
        qv: dict[float, np.ndarray] = {}
        dqdv: dict[float, np.ndarray] = {}
        dva: dict[float, DvaLandmarks] = {}
        cv: dict[float, float] = {}
        cap: dict[float, float] = {}
        for rpt in cell.rpts:
            curve = resample_qv(rpt.discharge_samples, grid=grid, smoothing=smoothing)
            qv[rpt.week_index] = curve.capacity
            dqdv[rpt.week_index] = compute_dqdv(curve).dqdv
            dva[rpt.week_index] = find_dva_peaks(
                compute_dvdq(rpt.discharge_samples, smoothing=smoothing)
            )
            cv[rpt.week_index] = rpt.cv_hold_seconds
            cap[rpt.week_index] = rpt.full_capacity_mAh
        out.append(
            CellCurveData(
                key=cell.key,
                condition=cell.condition,
                lifetime_weeks=cell.lifetime_weeks,
                qv=qv,
                dqdv=dqdv,
                dva=dva,
                cv_hold_seconds=cv,
                full_capacity_mAh=cap,
            )
        )
    return CurveDataset(voltage_grid=grid, cells=tuple(out), splits=splits)
