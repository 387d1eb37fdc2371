"""Parse raw per-cell cycling files into CellRecords with labels and splits.

Canonical input layout (one directory):
  manifest CSV   columns: group_id,c_chg,c_dis,dod_design
  per-cell CSVs  named G{group}C{cell}.csv with columns
                 week_index,phase,step,voltage_V,current_mA,capacity_mAh,time_s
                 where phase in {rpt, cycling} and step in
                 {charge_cc, charge_cv, discharge}

Each RPT week carries exactly one designated slow discharge (the C/5 cycle
for the published dataset; the adapter that converts vendor exports into
this layout is responsible for picking it).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .core import (
    EOL_THRESHOLD_MAH,
    RATED_CAPACITY_MAH,
    TEST_HIGH_DOD,
    TEST_LOW_DOD,
    TRAIN,
    CellKey,
    CellRecord,
    CyclingCondition,
    RptRecord,
    SplitAssignment,
)

REQUIRED_COLUMNS = (
    "week_index",
    "phase",
    "step",
    "voltage_V",
    "current_mA",
    "capacity_mAh",
    "time_s",
)
PHASES = ("rpt", "cycling")
STEPS = ("charge_cc", "charge_cv", "discharge")

CELL_FILE_RE = re.compile(r"^G(\d+)C(\d+)\.csv$")

# Train fraction of the high-DoD region reproducing the published 116/60 cell
# counts when run on the full dataset.
DEFAULT_TRAIN_FRACTION_HIGH_DOD = 116.0 / 176.0
DOD_BOUNDARY = 0.40


class IngestError(Exception):
    """Malformed input file or cell-level schema violation."""


@dataclass(frozen=True)
class ManifestRow:
    group_id: int
    c_chg: float
    c_dis: float
    dod_design: float


@dataclass(frozen=True)
class DatasetManifest:
    rows: tuple[ManifestRow, ...]
    rated_capacity_mAh: float = RATED_CAPACITY_MAH
    eol_threshold_mAh: float = EOL_THRESHOLD_MAH

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if abs(self.eol_threshold_mAh - 0.8 * self.rated_capacity_mAh) > 1e-9:
            raise ValueError("eol_threshold_mAh must be 0.8 * rated_capacity_mAh")
        seen = set()
        for r in self.rows:
            if r.group_id in seen:
                raise ValueError(f"duplicate group_id {r.group_id} in manifest")
            seen.add(r.group_id)

    def group(self, group_id: int) -> ManifestRow:
        for r in self.rows:
            if r.group_id == group_id:
                return r
        raise KeyError(f"group {group_id} not in manifest")


def load_manifest(path: Path | str) -> DatasetManifest:
    df = pd.read_csv(path, comment="#")
    missing = [c for c in ("group_id", "c_chg", "c_dis", "dod_design") if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: manifest missing columns {missing}")
    rows = tuple(
        ManifestRow(int(r.group_id), float(r.c_chg), float(r.c_dis), float(r.dod_design))
        for r in df.itertuples()
    )
    return DatasetManifest(rows=rows)


@dataclass
class IngestResult:
    cells: tuple[CellRecord, ...]
    splits: SplitAssignment
    warnings: tuple[str, ...] = ()

    def uncensored(self) -> tuple[CellRecord, ...]:
        return tuple(c for c in self.cells if c.lifetime_weeks is not None)


# ---------------------------------------------------------------------------
# Lifetime label
# ---------------------------------------------------------------------------

def compute_lifetime(
    weeks: Sequence[float],
    capacities_mAh: Sequence[float],
    threshold_mAh: float = EOL_THRESHOLD_MAH,
) -> tuple[Optional[float], Optional[str]]:
    """Weeks until full capacity first reaches the threshold (inclusive).

    Linear interpolation between the bracketing RPT weeks gives sub-week
    resolution; capacity never crossing means the cell is censored (None).
    Returns (lifetime_or_None, warning_or_None).
    """
    weeks = np.asarray(weeks, dtype=float)
    caps = np.asarray(capacities_mAh, dtype=float)
    if weeks.size < 2:
        raise ValueError("need >= 2 RPT capacities to compute a lifetime")
    if np.any(np.diff(weeks) <= 0):
        raise ValueError("RPT weeks must be strictly increasing")
    below = caps <= threshold_mAh
    if not below.any():
        return None, None
    k = int(np.argmax(below))
    if k == 0:
        return 0.0, "capacity already at/below threshold at week 0"
    w0, w1 = weeks[k - 1], weeks[k]
    c0, c1 = caps[k - 1], caps[k]
    frac = (c0 - threshold_mAh) / (c0 - c1)
    return float(w0 + frac * (w1 - w0)), None


# ---------------------------------------------------------------------------
# Measured depth of discharge
# ---------------------------------------------------------------------------

def measure_dod(
    cycling_discharge: Optional[np.ndarray],
    week0_full_capacity_mAh: float,
    dod_design: float,
) -> tuple[float, Optional[str]]:
    """Mean per-cycle (discharged capacity / week-0 full capacity), clipped to (0, 1.2].

    ``cycling_discharge`` holds time-ordered (voltage, capacity, time) rows of
    the first cycling week's discharge steps; a capacity drop marks the start
    of a new cycle.  Missing cycling data falls back to the design DoD.
    """
    if cycling_discharge is None or len(cycling_discharge) == 0:
        return float(dod_design), "no cycling data; using dod_design"
    caps = np.asarray(cycling_discharge, dtype=float)[:, 1]
    per_cycle = []
    seg_max = caps[0]
    for c in caps[1:]:
        if c < seg_max - 1e-9:  # reset -> new cycle
            per_cycle.append(seg_max)
            seg_max = c
        else:
            seg_max = max(seg_max, c)
    per_cycle.append(seg_max)
    ratio = float(np.mean(per_cycle) / week0_full_capacity_mAh)
    return float(np.clip(ratio, 1e-9, 1.2)), None


# ---------------------------------------------------------------------------
# Per-cell file parsing
# ---------------------------------------------------------------------------

def _check_nonmonotonic_time(df: pd.DataFrame, path: Path) -> None:
    for (week, phase, step), sub in df.groupby(["week_index", "phase", "step"], sort=False):
        t = sub["time_s"].to_numpy()
        if np.any(np.diff(t) < 0):
            row = sub.index[np.argmax(np.diff(t) < 0) + 1]
            raise IngestError(
                f"{path}:{row + 2}: non-monotonic time_s in week {week} {phase}/{step}"
            )


def parse_cell_file(
    path: Path | str, manifest_row: ManifestRow, eol_threshold_mAh: float = EOL_THRESHOLD_MAH
) -> tuple[CellRecord, tuple[str, ...]]:
    """Parse one canonical per-cell CSV into a labeled CellRecord."""
    path = Path(path)
    m = CELL_FILE_RE.match(path.name)
    if not m:
        raise IngestError(f"{path}: file name must match G<group>C<cell>.csv")
    group_id, cell_id = int(m.group(1)), int(m.group(2))

    df = pd.read_csv(path, comment="#")
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: missing column(s) {missing}")
    bad_phase = set(df["phase"].unique()) - set(PHASES)
    if bad_phase:
        raise IngestError(f"{path}: unknown phase value(s) {sorted(bad_phase)}")
    bad_step = set(df["step"].unique()) - set(STEPS)
    if bad_step:
        raise IngestError(f"{path}: unknown step value(s) {sorted(bad_step)}")
    _check_nonmonotonic_time(df, path)

    warnings: list[str] = []
    rpt_df = df[df["phase"] == "rpt"]
    rpts = []
    for week, sub in sorted(rpt_df.groupby("week_index"), key=lambda kv: kv[0]):
        dis = sub[sub["step"] == "discharge"].sort_values("time_s")
        if len(dis) == 0:
            raise IngestError(f"{path}: RPT week {week} has no discharge rows")
        chg = sub[sub["step"].isin(["charge_cc", "charge_cv"])].sort_values("time_s")
        cv = sub[sub["step"] == "charge_cv"]["time_s"].to_numpy()
        cv_hold = float(cv.max() - cv.min()) if cv.size >= 2 else 0.0
        if cv.size < 2:
            warnings.append(f"G{group_id}C{cell_id} week {week:g}: no CV hold recorded")
        samples = dis[["voltage_V", "capacity_mAh", "time_s"]].to_numpy(dtype=float)
        charge = (
            chg[["voltage_V", "capacity_mAh", "time_s"]].to_numpy(dtype=float)
            if len(chg)
            else np.zeros((0, 3))
        )
        try:
            rpts.append(
                RptRecord(
                    week_index=float(week),
                    discharge_samples=samples,
                    charge_samples=charge,
                    cv_hold_seconds=cv_hold,
                    full_capacity_mAh=float(samples[:, 1].max()),
                )
            )
        except ValueError as exc:
            raise IngestError(f"{path}: RPT week {week}: {exc}") from exc

    if not rpts or rpts[0].week_index != 0.0:
        raise IngestError(f"{path}: missing week-0 RPT")

    lifetime, life_warn = (None, None)
    if len(rpts) >= 2:
        lifetime, life_warn = compute_lifetime(
            [r.week_index for r in rpts],
            [r.full_capacity_mAh for r in rpts],
            eol_threshold_mAh,
        )
    if life_warn:
        warnings.append(f"G{group_id}C{cell_id}: {life_warn}")
    if lifetime == 0.0:
        # CellRecord requires lifetime > 0; a dead-on-arrival cell is treated
        # like a censored one downstream but the warning records why.
        lifetime = None

    cyc = df[(df["phase"] == "cycling") & (df["step"] == "discharge")]
    cycling_rows = None
    if len(cyc):
        first_week = cyc["week_index"].min()
        rows = cyc[cyc["week_index"] == first_week].sort_values("time_s")
        cycling_rows = rows[["voltage_V", "capacity_mAh", "time_s"]].to_numpy(dtype=float)
    dod_measured, dod_warn = measure_dod(
        cycling_rows, rpts[0].full_capacity_mAh, manifest_row.dod_design
    )
    if dod_warn:
        warnings.append(f"G{group_id}C{cell_id}: {dod_warn}")

    condition = CyclingCondition(
        c_chg=manifest_row.c_chg,
        c_dis=manifest_row.c_dis,
        dod_design=manifest_row.dod_design,
        dod_measured=dod_measured,
    )
    record = CellRecord(
        group_id=group_id,
        cell_id=cell_id,
        condition=condition,
        rpts=tuple(rpts),
        lifetime_weeks=lifetime,
    )
    return record, tuple(warnings)


def parse_cell_files(
    manifest: DatasetManifest, data_dir: Path | str
) -> tuple[tuple[CellRecord, ...], tuple[str, ...]]:
    """Parse every G*C*.csv under ``data_dir`` for groups listed in the manifest.

    Cells are returned in (group_id, cell_id) order regardless of directory
    order, so concurrent parsing would merge deterministically.
    """
    data_dir = Path(data_dir)
    files = []
    for p in sorted(data_dir.glob("G*C*.csv")):
        m = CELL_FILE_RE.match(p.name)
        if m:
            files.append((int(m.group(1)), int(m.group(2)), p))
    files.sort()
    if not files:
        raise IngestError(f"no G*C*.csv files found in {data_dir}")

    cells: list[CellRecord] = []
    warnings: list[str] = []
    for group_id, _cell_id, path in files:
        try:
            row = manifest.group(group_id)
        except KeyError:
            warnings.append(f"{path.name}: group {group_id} not in manifest; skipped")
            continue
        record, w = parse_cell_file(path, row, manifest.eol_threshold_mAh)
        cells.append(record)
        warnings.extend(w)
    return tuple(cells), tuple(warnings)


# ---------------------------------------------------------------------------
# Train/test partition
# ---------------------------------------------------------------------------

def assign_splits(
    cells: Sequence[CellRecord],
    dod_boundary: float = DOD_BOUNDARY,
    train_fraction_high_dod: float = DEFAULT_TRAIN_FRACTION_HIGH_DOD,
    seed: int = 0,
) -> tuple[SplitAssignment, tuple[str, ...]]:
    """Group-level split: low-DoD groups are the extrapolation test set,
    the rest are split into train and the in-distribution high-DoD test set
    by a deterministic seeded draw honoring the target cell counts.

    Only uncensored cells are assigned; the boundary is applied to the group
    mean measured DoD so that the split stays group-level.
    """
    labeled = [c for c in cells if c.lifetime_weeks is not None]
    if not labeled:
        raise ValueError("no uncensored cells to split")
    warnings: list[str] = []

    groups: dict[int, list[CellRecord]] = {}
    for c in labeled:
        groups.setdefault(c.group_id, []).append(c)
    group_dod = {
        g: float(np.mean([c.condition.dod_measured for c in cs])) for g, cs in groups.items()
    }

    low = sorted(g for g, d in group_dod.items() if d < dod_boundary)
    high = sorted(g for g, d in group_dod.items() if d >= dod_boundary)
    if not high:
        raise ValueError("no groups at or above the DoD boundary; cannot form a training set")
    if not low:
        warnings.append("no groups below the DoD boundary; low-DoD test set is empty")

    n_high_cells = sum(len(groups[g]) for g in high)
    target_test = n_high_cells - int(round(train_fraction_high_dod * n_high_cells))

    rng = np.random.default_rng(seed)
    order = [high[i] for i in rng.permutation(len(high))]
    test_groups: set[int] = set()
    remaining = target_test
    for g in order:
        size = len(groups[g])
        if size <= remaining:
            test_groups.add(g)
            remaining -= size
        if remaining == 0:
            break
    if remaining > 0:
        warnings.append(
            f"high-DoD test target missed by {remaining} cells (group sizes do not fit)"
        )

    tags: dict[CellKey, str] = {}
    for g in low:
        for c in groups[g]:
            tags[c.key] = TEST_LOW_DOD
    for g in high:
        tag = TEST_HIGH_DOD if g in test_groups else TRAIN
        for c in groups[g]:
            tags[c.key] = tag
    return SplitAssignment(tags=tags), tuple(warnings)


def run_ingest(
    manifest_path: Path | str,
    data_dir: Path | str,
    seed: int,
    dod_boundary: float = DOD_BOUNDARY,
    train_fraction_high_dod: float = DEFAULT_TRAIN_FRACTION_HIGH_DOD,
) -> IngestResult:
    manifest = load_manifest(manifest_path)
    cells, warnings = parse_cell_files(manifest, data_dir)
    splits, split_warnings = assign_splits(
        cells,
        dod_boundary=dod_boundary,
        train_fraction_high_dod=train_fraction_high_dod,
        seed=seed,
    )
    return IngestResult(
        cells=cells, splits=splits, warnings=tuple(warnings) + tuple(split_warnings)
    )


def write_splits_csv(splits: SplitAssignment, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["group_id,cell_id,split"]
    for (g, c), tag in sorted(splits.tags.items()):
        lines.append(f"{g},{c},{tag}")
    path.write_text("\n".join(lines) + "\n")


def read_splits_csv(path: Path | str) -> SplitAssignment:
    df = pd.read_csv(path, comment="#")
    tags = {
        (int(r.group_id), int(r.cell_id)): str(r.split) for r in df.itertuples()
    }
    return SplitAssignment(tags=tags)
