"""Shared domain types and the canonical feature naming scheme.

All types here are immutable after construction (frozen dataclasses; numpy
arrays are marked read-only), so they can be shared freely across workers.
"""

from __future__ import annotations

import dataclasses
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

VOLTAGE_MIN_V = 3.0
VOLTAGE_MAX_V = 4.2
DEFAULT_GRID_POINTS = 1000
RATED_CAPACITY_MAH = 250.0
EOL_THRESHOLD_MAH = 200.0  # 80% of rated capacity

TRAIN = "train"
TEST_HIGH_DOD = "test_high_dod"
TEST_LOW_DOD = "test_low_dod"
SPLIT_TAGS = (TRAIN, TEST_HIGH_DOD, TEST_LOW_DOD)

CellKey = tuple[int, int]  # (group_id, cell_id)


def default_voltage_grid(n_points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Fixed global voltage grid shared by all Q(V) and dQ/dV curves."""
    grid = np.linspace(VOLTAGE_MIN_V, VOLTAGE_MAX_V, n_points)
    grid.flags.writeable = False
    return grid


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=float))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CyclingCondition:
    """Protocol-level stress factors for one test group.

    C-rates are dimensionless multiples of the rated 250 mA current.
    ``dod_measured`` (from the first week of cycling) is the authoritative
    depth of discharge everywhere; ``dod_design`` is metadata only.
    """

    c_chg: float
    c_dis: float
    dod_design: float
    dod_measured: float

    def __post_init__(self):
        if not (0.0 < self.c_chg <= 4.0):
            raise ValueError(f"c_chg out of range (0, 4]: {self.c_chg}")
        if not (0.0 < self.c_dis <= 4.0):
            raise ValueError(f"c_dis out of range (0, 4]: {self.c_dis}")
        if not (0.0 <= self.dod_design <= 1.0):
            raise ValueError(f"dod_design out of range [0, 1]: {self.dod_design}")
        if not (0.0 < self.dod_measured <= 1.05):
            raise ValueError(f"dod_measured out of range (0, 1.05]: {self.dod_measured}")


@dataclass(frozen=True)
class RptRecord:
    """One reference performance test: the designated slow full cycle.

    ``discharge_samples`` and ``charge_samples`` are (n, 3) arrays with
    columns (voltage V, capacity mAh, time s), ordered by time.
    """

    week_index: float
    discharge_samples: np.ndarray
    charge_samples: np.ndarray
    cv_hold_seconds: float
    full_capacity_mAh: float

    # Tolerances for the raw-sample invariants; tester noise produces small
    # local capacity inversions even though the true signal is monotone.
    SPAN_TOL_V = 0.05
    MONOTONE_TOL_FRAC = 0.01

    def __post_init__(self):
        object.__setattr__(self, "discharge_samples", _freeze(self.discharge_samples))
        object.__setattr__(self, "charge_samples", _freeze(self.charge_samples))
        dis = self.discharge_samples
        if dis.ndim != 2 or dis.shape[1] != 3:
            raise ValueError("discharge_samples must be an (n, 3) array")
        v = dis[:, 0]
        if v.min() > VOLTAGE_MIN_V + self.SPAN_TOL_V or v.max() < VOLTAGE_MAX_V - self.SPAN_TOL_V:
            raise ValueError(
                f"week {self.week_index}: discharge voltage spans "
                f"[{v.min():.3f}, {v.max():.3f}] V, expected ~[3.0, 4.2] V"
            )
        q = dis[:, 1]
        if q.min() < -1e-9:
            raise ValueError("negative capacity in discharge samples")
        # Capacity must grow as voltage falls (samples are time-ordered).
        tol = self.MONOTONE_TOL_FRAC * max(q.max(), 1.0)
        if np.any(np.diff(q) < -tol):
            raise ValueError(
                f"week {self.week_index}: discharge capacity not monotone along discharge"
            )
        if self.full_capacity_mAh <= 0:
            raise ValueError("full_capacity_mAh must be positive")


@dataclass(frozen=True)
class CellRecord:
    """One cell's identity, cycling condition, RPT series, and lifetime label.

    ``lifetime_weeks`` is None for censored cells (never reached end of life);
    those are kept in ingestion output but excluded from training/evaluation.
    """

    group_id: int
    cell_id: int
    condition: CyclingCondition
    rpts: tuple[RptRecord, ...]
    lifetime_weeks: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "rpts", tuple(self.rpts))
        weeks = [r.week_index for r in self.rpts]
        if weeks != sorted(weeks):
            raise ValueError(f"cell {self.key}: RPTs not sorted by week_index")
        if not weeks or weeks[0] != 0.0:
            raise ValueError(f"cell {self.key}: first RPT must be at week 0")
        if self.lifetime_weeks is not None and self.lifetime_weeks <= 0:
            raise ValueError(f"cell {self.key}: lifetime_weeks must be > 0 when present")

    @property
    def key(self) -> CellKey:
        return (self.group_id, self.cell_id)

    def rpt_at(self, week: float) -> Optional[RptRecord]:
        for r in self.rpts:
            if r.week_index == week:
                return r
        return None

    @property
    def rpt_weeks(self) -> tuple[float, ...]:
        return tuple(r.week_index for r in self.rpts)


@dataclass(frozen=True)
class QvCurve:
    """Resampled discharge capacity vs voltage on a shared grid.

    ``capacity[i]`` is the capacity discharged by the time the cell reached
    ``voltage_grid[i]``, so capacity decreases with increasing voltage
    (Q at 3.0 V is the full discharge capacity, Q at 4.2 V is ~0).
    The canonical pipeline grid has 1000 uniform points on [3.0, 4.2] V.
    """

    voltage_grid: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "voltage_grid", _freeze(self.voltage_grid))
        object.__setattr__(self, "capacity", _freeze(self.capacity))
        if self.voltage_grid.ndim != 1 or self.voltage_grid.shape != self.capacity.shape:
            raise ValueError("voltage_grid and capacity must be 1-D arrays of equal length")
        if self.voltage_grid.size < 2:
            raise ValueError("curve needs at least 2 grid points")
        if np.any(np.diff(self.voltage_grid) <= 0):
            raise ValueError("voltage_grid must be strictly increasing")
        if not np.all(np.isfinite(self.capacity)):
            raise ValueError("capacity contains non-finite values")


@dataclass(frozen=True)
class FeatureMatrix:
    """Named early-life feature columns x cells.

    ``transforms[j]`` records whether column j is stored raw ("identity") or
    as log(|x| + eps) ("log_abs").
    """

    feature_names: tuple[str, ...]
    values: np.ndarray
    cell_keys: tuple[CellKey, ...]
    transforms: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "cell_keys", tuple(tuple(k) for k in self.cell_keys))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        object.__setattr__(self, "values", _freeze(self.values))
        n, p = self.values.shape
        if len(self.cell_keys) != n:
            raise ValueError("cell_keys length does not match row count")
        if len(self.feature_names) != p or len(self.transforms) != p:
            raise ValueError("feature_names/transforms length does not match column count")
        if len(set(self.feature_names)) != p:
            raise ValueError("duplicate feature names")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains NaN/Inf after assembly")
        bad = set(self.transforms) - {"identity", "log_abs"}
        if bad:
            raise ValueError(f"unknown transforms: {sorted(bad)}")

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"feature not in matrix: {name}") from None
        return self.values[:, j]

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        idx = [self.feature_names.index(n) for n in names]
        return FeatureMatrix(
            feature_names=tuple(names),
            values=self.values[:, idx],
            cell_keys=self.cell_keys,
            transforms=tuple(self.transforms[j] for j in idx),
        )

    def restrict(self, keys: Sequence[CellKey]) -> "FeatureMatrix":
        keyset = {tuple(k) for k in keys}
        rows = [i for i, k in enumerate(self.cell_keys) if k in keyset]
        return FeatureMatrix(
            feature_names=self.feature_names,
            values=self.values[rows, :],
            cell_keys=tuple(self.cell_keys[i] for i in rows),
            transforms=self.transforms,
        )


@dataclass(frozen=True)
class SplitAssignment:
    """Group-level partition of cells into train / test_high_dod / test_low_dod."""

    tags: Mapping[CellKey, str]

    def __post_init__(self):
        object.__setattr__(self, "tags", dict(self.tags))
        per_group: dict[int, str] = {}
        for key, tag in self.tags.items():
            if tag not in SPLIT_TAGS:
                raise ValueError(f"unknown split tag {tag!r} for cell {key}")
            g = key[0]
            if per_group.setdefault(g, tag) != tag:
                raise ValueError(f"group {g} has cells with different split tags")

    def tag(self, key: CellKey) -> str:
        return self.tags[key]

    def cells_with(self, tag: str) -> tuple[CellKey, ...]:
        return tuple(sorted(k for k, t in self.tags.items() if t == tag))

    def counts(self) -> dict[str, int]:
        out = {t: 0 for t in SPLIT_TAGS}
        for t in self.tags.values():
            out[t] += 1
        return out


# ---------------------------------------------------------------------------
# Canonical feature naming
# ---------------------------------------------------------------------------

FEATURE_KINDS = (
    "dqdv_delta",        # stats of d(dQ/dV) between two weeks, optional voltage window
    "qv_delta",          # stats of dQ(V) between two weeks
    "cv_time",           # CV hold time at one week
    "cv_time_delta",     # change in CV hold time between two weeks
    "capacity",          # full or windowed discharge capacity at one week
    "capacity_delta",    # change in full capacity between two weeks
    "dva_capacity_delta",  # change in a DVA capacity landmark between two weeks
    "stress",            # cycling-stress proxy, variant in {chg, dchg, avg, mult}
    "condition",         # raw protocol parameter, variant in {c_chg, c_dis, dod}
)


@dataclass(frozen=True)
class FeatureDescriptor:
    """Structured description of one feature column; see canonical_feature_name."""

    kind: str
    transform: str = "identity"
    stat: Optional[str] = None            # mean | var | min | skew | kurtosis
    weeks: Optional[tuple[float, float]] = None  # (later week j, earlier week i)
    week: Optional[float] = None
    window: Optional[tuple[float, float]] = None  # (v_lo, v_hi) volts
    index: Optional[int] = None           # DVA landmark 1..4
    variant: Optional[str] = None         # stress/condition variant


def _fmt_week(w: float) -> str:
    return f"w{w:g}"


def _fmt_weeks(weeks: tuple[float, float]) -> str:
    j, i = weeks
    return f"{_fmt_week(j)}-{_fmt_week(i)}"


def _fmt_window(window: tuple[float, float]) -> str:
    lo, hi = window
    return f"{lo:.2f}V-{hi:.2f}V"


def _require(d: FeatureDescriptor, *fields: str) -> None:
    for f in fields:
        if getattr(d, f) is None:
            raise ValueError(f"feature descriptor kind={d.kind!r}: missing field {f!r}")


def canonical_feature_name(d: FeatureDescriptor) -> str:
    """Deterministic, collision-free identifier for a feature descriptor.

    The identity transform carries no prefix; log_abs columns are prefixed
    "log_abs.".  Examples:

      dqdv_delta, weeks (3,0), window (3.60,3.90), mean, log_abs
          -> "log_abs.mean.d_dqdv.w3-w0.3.60V-3.90V"
      stress, avg -> "stress.avg"
      dva_capacity_delta, index 1, weeks (3,0) -> "delta_q_dva1.w3-w0"
    """
    if d.kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {d.kind!r}")
    if d.transform not in ("identity", "log_abs"):
        raise ValueError(f"unknown transform {d.transform!r}")
    prefix = "" if d.transform == "identity" else "log_abs."

    if d.kind == "dqdv_delta":
        _require(d, "stat", "weeks")
        body = f"{d.stat}.d_dqdv.{_fmt_weeks(d.weeks)}"
        if d.window is not None:
            body += f".{_fmt_window(d.window)}"
        return prefix + body
    if d.kind == "qv_delta":
        _require(d, "stat", "weeks")
        return prefix + f"{d.stat}.d_q.{_fmt_weeks(d.weeks)}"
    if d.kind == "cv_time":
        _require(d, "week")
        return prefix + f"cv_time.{_fmt_week(d.week)}"
    if d.kind == "cv_time_delta":
        _require(d, "weeks")
        return prefix + f"d_cv_time.{_fmt_weeks(d.weeks)}"
    if d.kind == "capacity":
        _require(d, "week")
        body = f"q.{_fmt_week(d.week)}"
        if d.window is not None:
            body += f".{_fmt_window(d.window)}"
        return prefix + body
    if d.kind == "capacity_delta":
        _require(d, "weeks")
        return prefix + f"d_q_total.{_fmt_weeks(d.weeks)}"
    if d.kind == "dva_capacity_delta":
        _require(d, "index", "weeks")
        if d.index not in (1, 2, 3, 4):
            raise ValueError(f"DVA landmark index must be 1..4, got {d.index}")
        return prefix + f"delta_q_dva{d.index}.{_fmt_weeks(d.weeks)}"
    if d.kind == "stress":
        _require(d, "variant")
        if d.variant not in ("chg", "dchg", "avg", "mult"):
            raise ValueError(f"unknown stress variant {d.variant!r}")
        return prefix + f"stress.{d.variant}"
    if d.kind == "condition":
        _require(d, "variant")
        if d.variant not in ("c_chg", "c_dis", "dod"):
            raise ValueError(f"unknown condition variant {d.variant!r}")
        return prefix + f"cond.{d.variant}"
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_artifact(obj, path: Path | str) -> None:
    """Persist a pipeline artifact (content-deterministic pickle)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(obj, fh, protocol=4)


def load_artifact(path: Path | str):
    with open(path, "rb") as fh:
        return pickle.load(fh)


def structurally_equal(a, b) -> bool:
    """Deep equality that treats numpy arrays by value (round-trip checks)."""
    if type(a) is not type(b):
        return False
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and np.array_equal(a, b)
    if dataclasses.is_dataclass(a) and not isinstance(a, type):
        return all(
            structurally_equal(getattr(a, f.name), getattr(b, f.name))
            for f in dataclasses.fields(a)
        )
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(structurally_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(structurally_equal(x, y) for x, y in zip(a, b))
    return a == b
