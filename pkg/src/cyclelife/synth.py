"""Synthetic dataset generator in the canonical file layout.

Ground truth: each cell carries a latent degradation rate

    k = k0 * Stress_avg^stress_exponent * exp(cell_log_rate_sigma * z)

in mAh/week, full capacity fades linearly at rate k, and the true lifetime
is (Q0 - 200)/k weeks.  The discharge density |dQ/dV| is a baseline plus
three Gaussian humps; the two mid-voltage humps lose amplitude in
proportion to k*week, so the mean change of dQ/dV over [3.6, 3.9] V carries
the rate signal exactly and the optimized-window feature is log-affine in
log lifetime.  Measurement noise is optional and off by default scale 0.

The generator ships with the package (not tests-only) so the pipeline can
run end to end without the public dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_STRESS_TIERS = (0.5, 0.9, 1.3, 1.7)


@dataclass(frozen=True)
class SynthSpec:
    n_groups: int = 16
    cells_per_group: int = 4
    stress_tiers: tuple[float, ...] = DEFAULT_STRESS_TIERS
    dod_range: tuple[float, float] = (0.25, 1.0)
    rate_asymmetry: tuple[float, float] = (0.85, 1.18)  # c_chg/c_dis spread
    q0_mAh: float = 250.0
    eol_mAh: float = 200.0
    k0_mAh_per_week: float = 8.0
    stress_exponent: float = 1.5
    cell_log_rate_sigma: float = 0.06
    hysteresis: float = 0.975           # measured DoD / design DoD
    cv0_seconds: float = 600.0
    cv_slope_seconds: float = 25.0      # seconds of extra CV hold per (mAh/week of k)
    noise: float = 0.0                  # measurement noise scale (1.0 ~ 0.1% of capacity)
    min_rpt_weeks: int = 4
    max_rpt_weeks: int = 40
    half_week_min_group: Optional[int] = None  # groups >= this also get a week-0.5 RPT
    n_discharge_points: int = 240
    seed: int = 0


@dataclass(frozen=True)
class SynthCellTruth:
    group_id: int
    cell_id: int
    c_chg: float
    c_dis: float
    dod_design: float
    dod_true: float
    stress_avg: float
    tier: int
    rate_mAh_per_week: float
    lifetime_weeks: float


# Discharge density shape: baseline + low hump + two mid humps that fade.
_LOW_PEAK = (3.25, 0.10, 70.0)
_MID_PEAK_1 = (3.65, 0.055, 60.0)
_MID_PEAK_2 = (3.87, 0.055, 60.0)
_FADE_SPLIT = 0.5  # each mid hump carries half of the fade rate


def _gauss(v: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((v - center) / width) ** 2) / (width * math.sqrt(2 * math.pi))


def _density(v: np.ndarray, k: float, week: float, q0: float) -> np.ndarray:
    """|dQ/dV| in mAh/V at a given age; integrates to ~q0 - k*week."""
    base = (q0 - _LOW_PEAK[2] - _MID_PEAK_1[2] - _MID_PEAK_2[2]) / 1.2
    a1 = max(_MID_PEAK_1[2] - _FADE_SPLIT * k * week, 2.0)
    a2 = max(_MID_PEAK_2[2] - _FADE_SPLIT * k * week, 2.0)
    rho = (
        base
        + _LOW_PEAK[2] * _gauss(v, _LOW_PEAK[0], _LOW_PEAK[1])
        + a1 * _gauss(v, _MID_PEAK_1[0], _MID_PEAK_1[1])
        + a2 * _gauss(v, _MID_PEAK_2[0], _MID_PEAK_2[1])
    )
    return rho


def _discharge_curve(
    k: float, week: float, q0: float, n_points: int
) -> tuple[np.ndarray, np.ndarray]:
    """(voltage descending 4.2 -> 3.0, cumulative discharged capacity)."""
    v_desc = np.linspace(4.2, 3.0, n_points)
    rho = _density(v_desc, k, week, q0)
    dv = (4.2 - 3.0) / (n_points - 1)
    q = np.concatenate([[0.0], np.cumsum((rho[1:] + rho[:-1]) * 0.5 * dv)])
    return v_desc, q


def _conditions(spec: SynthSpec, rng: np.random.Generator):
    out = []
    for g in range(spec.n_groups):
        tier = g % len(spec.stress_tiers)
        stress = spec.stress_tiers[tier]
        lo = max(spec.dod_range[0], stress**2 / 3.0)
        dod = float(rng.uniform(lo, spec.dod_range[1]))
        r = float(rng.uniform(*spec.rate_asymmetry))
        c_chg = min(stress**2 * r / dod, 4.0)
        c_dis = min(stress**2 / (r * dod), 4.0)
        out.append((g + 1, c_chg, c_dis, dod, tier))
    return out


def generate_synthetic(
    spec: SynthSpec, out_dir: Path | str
) -> tuple[list[SynthCellTruth], Path]:
    """Emit manifest.csv, per-cell G{g}C{c}.csv files, and truth.csv.

    Deterministic for a fixed spec: same seed gives byte-identical files.
    Returns the ground-truth rows and the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    conditions = _conditions(spec, rng)

    manifest_lines = ["group_id,c_chg,c_dis,dod_design"]
    truths: list[SynthCellTruth] = []
    for group_id, c_chg, c_dis, dod_design, tier in conditions:
        manifest_lines.append(
            f"{group_id},{c_chg:.6f},{c_dis:.6f},{dod_design:.6f}"
        )
        for cell_id in range(1, spec.cells_per_group + 1):
            truth = _emit_cell(
                spec, rng, out_dir, group_id, cell_id, c_chg, c_dis, dod_design, tier
            )
            truths.append(truth)

    manifest_path = out_dir / "manifest.csv"
    manifest_path.write_text("\n".join(manifest_lines) + "\n")

    truth_lines = [
        "group_id,cell_id,c_chg,c_dis,dod_design,dod_true,stress_avg,tier,"
        "rate_mAh_per_week,lifetime_weeks"
    ]
    for t in truths:
        truth_lines.append(
            f"{t.group_id},{t.cell_id},{t.c_chg:.6f},{t.c_dis:.6f},"
            f"{t.dod_design:.6f},{t.dod_true:.6f},{t.stress_avg:.6f},{t.tier},"
            f"{t.rate_mAh_per_week:.6f},{t.lifetime_weeks:.6f}"
        )
    (out_dir / "truth.csv").write_text("\n".join(truth_lines) + "\n")
    return truths, manifest_path


def _emit_cell(
    spec: SynthSpec,
    rng: np.random.Generator,
    out_dir: Path,
    group_id: int,
    cell_id: int,
    c_chg: float,
    c_dis: float,
    dod_design: float,
    tier: int,
) -> SynthCellTruth:
    stress = 0.5 * (math.sqrt(c_chg * dod_design) + math.sqrt(c_dis * dod_design))
    k = (
        spec.k0_mAh_per_week
        * stress**spec.stress_exponent
        * math.exp(spec.cell_log_rate_sigma * rng.standard_normal())
    )
    # True lifetime uses the week-0 capacity as actually emitted (the hump
    # tails truncated at 3.0 V shave ~0.4 mAh off the nominal q0), so at
    # noise 0 the ingested label reproduces this value exactly.
    q_at_w0 = _discharge_curve(k, 0.0, spec.q0_mAh, spec.n_discharge_points)[1][-1]
    lifetime = (q_at_w0 - spec.eol_mAh) / k
    dod_true = dod_design * spec.hysteresis

    weeks: list[float] = [0.0]
    if spec.half_week_min_group is not None and group_id >= spec.half_week_min_group:
        weeks.append(0.5)
    last = min(max(spec.min_rpt_weeks, math.ceil(lifetime) + 1), spec.max_rpt_weeks)
    weeks.extend(float(w) for w in range(1, last + 1))

    noise_q = 0.25 * spec.noise  # mAh, ~0.1% of capacity at scale 1
    lines = ["week_index,phase,step,voltage_V,current_mA,capacity_mAh,time_s"]

    def fmt(week, phase, step, v, i, q, t):
        lines.append(
            f"{week:g},{phase},{step},{v:.4f},{i:.2f},{q:.4f},{t:.1f}"
        )

    for week in weeks:
        # CC charge at C/2 (3.0 -> 4.2 V), then the CV hold at 4.2 V.
        t = 0.0
        for v in np.linspace(3.0, 4.2, 25):
            q = (v - 3.0) / 1.2 * spec.q0_mAh * 0.95
            fmt(week, "rpt", "charge_cc", v, 125.0, q, t)
            t += 300.0
        cv_hold = spec.cv0_seconds + spec.cv_slope_seconds * k * week
        cv_hold += 2.0 * spec.noise * rng.standard_normal()
        cv_hold = max(cv_hold, 30.0)
        for frac in np.linspace(0.0, 1.0, 8):
            fmt(
                week, "rpt", "charge_cv", 4.2, 125.0 * math.exp(-3 * frac),
                spec.q0_mAh * (0.95 + 0.05 * frac), t + frac * cv_hold,
            )
        # C/5 discharge used for curve features.
        v_desc, q_curve = _discharge_curve(k, week, spec.q0_mAh, spec.n_discharge_points)
        if noise_q > 0:
            q_curve = q_curve + noise_q * rng.standard_normal(q_curve.size)
            q_curve = np.maximum.accumulate(q_curve)  # testers integrate current
            q_curve = np.maximum(q_curve, 0.0)
        t0 = t + cv_hold + 600.0
        q_full = q_curve[-1]
        for v, q in zip(v_desc, q_curve):
            fmt(week, "rpt", "discharge", v, -50.0, q, t0)
            t0 += 18000.0 / spec.n_discharge_points

    # First cycling week: three partial-DoD cycles (enough to measure DoD).
    per_cycle = dod_true * q_at_w0
    t = 1.0e6
    for _cycle in range(3):
        q_noise = noise_q * rng.standard_normal() if noise_q > 0 else 0.0
        for frac in np.linspace(0.0, 1.0, 12):
            v = 4.2 - 1.2 * dod_true * frac
            fmt(0, "cycling", "discharge", v, -250.0 * c_dis,
                max(frac * per_cycle + q_noise * frac, 0.0), t)
            t += 60.0

    path = out_dir / f"G{group_id}C{cell_id}.csv"
    path.write_text("\n".join(lines) + "\n")
    return SynthCellTruth(
        group_id=group_id,
        cell_id=cell_id,
        c_chg=c_chg,
        c_dis=c_dis,
        dod_design=dod_design,
        dod_true=dod_true,
        stress_avg=stress,
        tier=tier,
        rate_mAh_per_week=k,
        lifetime_weeks=lifetime,
    )
