"""Stage implementations and the end-to-end pipeline runner.

Every stage writes its outputs plus a manifest recording the content hashes
of its inputs and its config section; rerunning with unchanged inputs skips
the stage.  All output files embed the config hash and package version.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    PipelineConfig,
    config_hash,
    require_seed,
    section_hash,
)
from .core import (
    CellKey,
    FeatureMatrix,
    SPLIT_TAGS,
    TRAIN,
    TEST_HIGH_DOD,
    TEST_LOW_DOD,
    load_artifact,
    save_artifact,
)
from .curves import CurveDataset, build_curve_dataset
from .features import (
    DEFAULT_WINDOWS,
    assemble_matrix,
    build_feature_columns,
    window_grid_search,
    windows_from_search,
)
from .hbm import (
    ClusterAssignment,
    HbmPosterior,
    SamplerConfig,
    constrained_kmeans,
    fit_hbm,
    posterior_predict,
)
from .ingest import read_splits_csv, run_ingest, write_splits_csv
from .regress import (
    CONDITION_FEATURES,
    ElasticNetFit,
    dummy_model,
    fit_tuned_elastic_net,
    predict_matrix,
)
from .report import (
    ModelPredictions,
    comparison_table,
    emit_feature_scatter,
    emit_hbm_intervals,
    emit_lifetime_histogram,
    emit_pred_vs_true,
    emit_selection_trace,
    week_pair_sweep,
    write_comparison_csv,
    write_json,
    write_sweep_csv,
)
from .selection import SelectionTrace, forward_select, pick_feature_count
from .synth import SynthSpec, generate_synthetic

DISCHARGE_FEATURE_PREFIXES = (
    "log_abs.var.d_q.",
    "log_abs.min.d_q.",
    "skew.d_q.",
    "kurtosis.d_q.",
    "log_abs.q.w0",
)


class StageError(RuntimeError):
    """A pipeline stage failed; the stage name is in the message."""


def provenance_line(cfg: PipelineConfig) -> str:
    return f"config_hash={config_hash(cfg)} version=cyclelife-{__version__}"


def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(out_dir: Path, stage: str) -> Path:
    return out_dir / "manifests" / f"{stage}.json"


def stage_is_current(
    out_dir: Path, stage: str, sect_hash: str, inputs: Sequence[Path], outputs: Sequence[Path]
) -> bool:
    mpath = _manifest_path(out_dir, stage)
    if not mpath.exists():
        return False
    try:
        recorded = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        return False
    if recorded.get("section_hash") != sect_hash:
        return False
    if recorded.get("inputs") != {str(p): _file_hash(Path(p)) for p in inputs}:
        return False
    return all(Path(p).exists() for p in recorded.get("outputs", [])) and set(
        recorded.get("outputs", [])
    ) == {str(p) for p in outputs}


def record_stage(
    out_dir: Path, stage: str, sect_hash: str, inputs: Sequence[Path], outputs: Sequence[Path]
) -> None:
    mpath = _manifest_path(out_dir, stage)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text(
        json.dumps(
            {
                "section_hash": sect_hash,
                "inputs": {str(p): _file_hash(Path(p)) for p in inputs},
                "outputs": sorted(str(p) for p in outputs),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )


# ---------------------------------------------------------------------------
# features.csv round trip
# ---------------------------------------------------------------------------

def write_features_csv(
    path: Path | str,
    matrix: FeatureMatrix,
    lifetimes: Mapping[CellKey, Optional[float]],
    splits: Mapping[CellKey, str],
    provenance: str = "",
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if provenance:
        lines.append(f"# {provenance}")
    lines.append("group_id,cell_id,lifetime_weeks,split," + ",".join(matrix.feature_names))
    for i, key in enumerate(matrix.cell_keys):
        life = lifetimes.get(key)
        life_s = "" if life is None else f"{life:.8g}"
        row = [str(key[0]), str(key[1]), life_s, splits.get(key, "")]
        row.extend(f"{v:.12g}" for v in matrix.values[i])
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def read_features_csv(
    path: Path | str,
) -> tuple[FeatureMatrix, dict[CellKey, float], dict[CellKey, str]]:
    import pandas as pd

    df = pd.read_csv(path, comment="#")
    meta = ["group_id", "cell_id", "lifetime_weeks", "split"]
    feature_names = [c for c in df.columns if c not in meta]
    keys = [(int(g), int(c)) for g, c in zip(df["group_id"], df["cell_id"])]
    matrix = FeatureMatrix(
        feature_names=tuple(feature_names),
        values=df[feature_names].to_numpy(dtype=float),
        cell_keys=tuple(keys),
        transforms=tuple(
            "log_abs" if n.startswith("log_abs.") else "identity" for n in feature_names
        ),
    )
    lifetimes = {
        k: float(v)
        for k, v in zip(keys, df["lifetime_weeks"])
        if not (isinstance(v, float) and math.isnan(v))
    }
    splits = {
        k: str(s)
        for k, s in zip(keys, df["split"])
        if isinstance(s, str) and s in SPLIT_TAGS
    }
    return matrix, lifetimes, splits


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig) -> Path:
    s = cfg.synth
    out_dir = Path(s.out_dir)
    spec = SynthSpec(
        n_groups=s.n_groups,
        cells_per_group=s.cells_per_group,
        noise=s.noise,
        min_rpt_weeks=s.min_rpt_weeks,
        half_week_min_group=s.half_week_min_group,
        seed=require_seed(s.seed, "synth"),
    )
    generate_synthetic(spec, out_dir)
    return out_dir / "manifest.csv"


def stage_ingest(cfg: PipelineConfig) -> tuple[Path, Path]:
    c = cfg.ingest
    if not c.manifest or not c.data_dir or not c.out:
        raise ConfigError("[ingest] needs manifest, data_dir, and out")
    result = run_ingest(
        c.manifest,
        c.data_dir,
        seed=require_seed(c.seed, "ingest"),
        dod_boundary=c.dod_boundary,
        train_fraction_high_dod=c.train_fraction_high_dod,
    )
    out = Path(c.out)
    save_artifact(result, out)
    splits_path = out.with_name("splits.csv")
    write_splits_csv(result.splits, splits_path)
    return out, splits_path


def stage_curves(cfg: PipelineConfig) -> Path:
    c = cfg.curves
    if not c.infile or not c.out:
        raise ConfigError("[curves] needs in and out")
    ingest_result = load_artifact(c.infile)
    dataset = build_curve_dataset(
        ingest_result.cells,
        splits=ingest_result.splits,
        grid_points=c.grid_points,
        smoothing=c.smoothing,
    )
    out = Path(c.out)
    save_artifact(dataset, out)
    if c.dump_csv:
        _dump_curves_csv(dataset, Path(c.dump_csv), provenance_line(cfg))
    return out


def _dump_curves_csv(dataset: CurveDataset, dump_dir: Path, provenance: str) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    grid = dataset.voltage_grid
    for cell in dataset.cells:
        for week in cell.weeks:
            lines = [f"# {provenance}", "voltage_V,capacity_mAh,dqdv_mAh_per_V"]
            for v, q, d in zip(grid, cell.qv[week], cell.dqdv[week]):
                lines.append(f"{v:.6f},{q:.6f},{d:.6f}")
            name = f"G{cell.key[0]}C{cell.key[1]}_qv_w{week:g}.csv"
            (dump_dir / name).write_text("\n".join(lines) + "\n")


def _parse_weeks(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"weeks must be 'later,earlier', got {text!r}")
    j, i = float(parts[0]), float(parts[1])
    if j <= i:
        raise ConfigError(f"weeks must be a (later, earlier) pair, got {text!r}")
    return j, i


def train_only(dataset: CurveDataset) -> CurveDataset:
    if dataset.splits is None:
        raise StageError("features: curve dataset carries no split assignment")
    keys = set(dataset.splits.cells_with(TRAIN))
    cells = tuple(c for c in dataset.cells if c.key in keys)
    return CurveDataset(voltage_grid=dataset.voltage_grid, cells=cells, splits=dataset.splits)


def stage_features(cfg: PipelineConfig) -> Path:
    f = cfg.features
    if not f.infile or not f.out:
        raise ConfigError("[features] needs in and out")
    dataset: CurveDataset = load_artifact(f.infile)
    weeks = _parse_weeks(f.weeks)
    prov = provenance_line(cfg)

    windows = DEFAULT_WINDOWS
    search_payload = None
    if f.search_window:
        result = window_grid_search(train_only(dataset), weeks=weeks)
        windows = windows_from_search(result.best_window)
        search_payload = {
            "v_lo": result.best_window[0],
            "v_hi": result.best_window[1],
            "statistic": result.best_statistic,
            "abs_pearson": result.best_abs_pearson,
        }
        if f.windows_audit:
            audit = Path(f.windows_audit)
            audit.parent.mkdir(parents=True, exist_ok=True)
            lines = [f"# {prov}", "v_lo,v_hi,statistic,pearson_r"]
            for (lo, hi), stat, r in result.full_grid:
                lines.append(f"{lo:.2f},{hi:.2f},{stat},{r:.8g}")
            audit.write_text("\n".join(lines) + "\n")

    mid = windows[1] if len(windows) == 3 else windows[0]
    columns = build_feature_columns(dataset, weeks=weeks, windows=windows, mid_window=mid)
    labeled = [c.key for c in dataset.cells if c.lifetime_weeks is not None]
    matrix, report = assemble_matrix(columns, cell_keys=labeled, policy="impute_median")
    lifetimes = {c.key: c.lifetime_weeks for c in dataset.cells}
    splits = dataset.splits.tags if dataset.splits is not None else {}
    out = Path(f.out)
    write_features_csv(out, matrix, lifetimes, splits, provenance=prov)
    meta = {
        "weeks": list(weeks),
        "windows": [list(w) for w in windows],
        "search": search_payload,
        "imputed": [[list(k), name] for k, name in report.imputed],
        "dropped": [list(k) for k in report.dropped_cells],
    }
    write_json(meta, out.with_suffix(".meta.json"), provenance=prov)
    return out


def stage_select(cfg: PipelineConfig) -> Path:
    s = cfg.select
    if not s.features or not s.out:
        raise ConfigError("[select] needs features and out")
    matrix, lifetimes, splits = read_features_csv(s.features)
    if s.splits:
        splits = read_splits_csv(s.splits).tags
    train_keys = [k for k in matrix.cell_keys if splits.get(k) == TRAIN and k in lifetimes]
    train = matrix.restrict(train_keys)
    y_log = np.log([lifetimes[k] for k in train.cell_keys])
    groups = [k[0] for k in train.cell_keys]
    trace = forward_select(
        train,
        y_log,
        groups,
        k=s.k,
        repeats=s.repeats,
        max_features=s.max_features,
        seed=require_seed(s.seed, "select"),
    )
    choice = pick_feature_count(trace)
    out = Path(s.out)
    payload = {
        "config": asdict(trace.config),
        "steps": [
            {
                "feature": st.feature,
                "cv_rmse_mean": st.cv_rmse_mean,
                "cv_rmse_std": st.cv_rmse_std,
                "runner_up": [[n, m] for n, m in st.runner_up],
            }
            for st in trace.steps
        ],
        "n_selected": choice.n_selected,
        "candidates": list(choice.candidates),
    }
    write_json(payload, out, provenance=provenance_line(cfg))
    emit_selection_trace(trace, out.with_suffix(".csv"), provenance=provenance_line(cfg))
    return out


def load_trace_features(trace_path: Path | str, n: int) -> tuple[str, ...]:
    data = json.loads(Path(trace_path).read_text())
    steps = data["steps"]
    if n > len(steps):
        raise StageError(f"trace has {len(steps)} steps, cannot take {n} features")
    return tuple(st["feature"] for st in steps[:n])


def discharge_feature_names(available: Sequence[str]) -> tuple[str, ...]:
    """The five implementable features of the published discharge model."""
    names = []
    for prefix in DISCHARGE_FEATURE_PREFIXES:
        matches = [n for n in available if n.startswith(prefix)]
        # exclude windowed q.w0 columns when matching the plain initial capacity
        if prefix == "log_abs.q.w0":
            matches = [n for n in matches if n == "log_abs.q.w0"]
        if not matches:
            raise StageError(f"discharge model feature missing (prefix {prefix!r})")
        names.append(sorted(matches)[0])
    return tuple(names)


def _enet_fit_payload(fit: ElasticNetFit, tune, features_csv: str, model: str) -> dict:
    return {
        "model": model,
        "n_features": len(fit.feature_names),
        "features": list(fit.feature_names),
        "alpha": fit.alpha,
        "lambda": fit.lam,
        "intercept": fit.intercept,
        "coefficients": [float(b) for b in fit.coefficients],
        "feature_means": [float(m) for m in fit.feature_means],
        "feature_stds": [float(s) for s in fit.feature_stds],
        "warning": fit.warning,
        "features_csv": str(Path(features_csv).resolve()),
        "cv_alpha_lambda_rmse": [list(row) for row in (tune.cv_table if tune else [])],
    }


def stage_train(cfg: PipelineConfig, model: str) -> Path:
    t = cfg.train
    if not t.features or not t.out_dir:
        raise ConfigError("[train] needs features and out_dir")
    matrix, lifetimes, splits = read_features_csv(t.features)
    train_keys = [k for k in matrix.cell_keys if splits.get(k) == TRAIN and k in lifetimes]
    train = matrix.restrict(train_keys)
    y_weeks = np.array([lifetimes[k] for k in train.cell_keys])
    y_log = np.log(y_weeks)
    groups = [k[0] for k in train.cell_keys]
    seed = require_seed(t.seed, "train")
    out_dir = Path(t.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lambdas = tuple(t.lambdas) if t.lambdas else tuple(np.logspace(-4, 1, 31))
    tune_kwargs = dict(alphas=t.alphas, lambdas=lambdas, k=t.cv_k, repeats=t.cv_repeats)

    if model == "dummy":
        m = dummy_model(y_weeks)
        payload = {
            "model": "dummy",
            "n_features": 0,
            "mean_weeks": m.mean_weeks,
            "features_csv": str(Path(t.features).resolve()),
        }
        out = out_dir / "fit_dummy.json"
    elif model in ("conditions", "enet", "discharge"):
        if model == "conditions":
            names = CONDITION_FEATURES
            out = out_dir / "fit_conditions.json"
        elif model == "discharge":
            names = discharge_feature_names(matrix.feature_names)
            out = out_dir / "fit_discharge.json"
        else:
            if not t.select:
                raise ConfigError("[train] model=enet needs a selection trace path")
            names = load_trace_features(t.select, t.n_features)
            out = out_dir / f"fit_enet_{t.n_features}.json"
        fit, tune = fit_tuned_elastic_net(
            train, names, y_log, groups, seed=seed, **tune_kwargs
        )
        payload = _enet_fit_payload(fit, tune, t.features, model)
    else:
        raise ConfigError(f"unknown model {model!r}")
    write_json(payload, out, provenance=provenance_line(cfg))
    return out


@dataclass
class HbmArtifact:
    posterior: HbmPosterior
    clusters: ClusterAssignment
    cluster_by_key: dict[CellKey, int]
    cluster_feature: str
    cell_features: tuple[str, ...]
    features_csv: str


def stage_hbm(cfg: PipelineConfig) -> Path:
    h = cfg.hbm
    if not h.features or not h.out:
        raise ConfigError("[hbm] needs features and out")
    matrix, lifetimes, splits = read_features_csv(h.features)
    seed = require_seed(h.seed, "hbm")
    if h.cell_features == "auto":
        raise ConfigError("[hbm] cell_features must list feature names (or use `run`)")
    cell_features = tuple(n.strip() for n in h.cell_features.split(",") if n.strip())

    labeled = [k for k in matrix.cell_keys if k in lifetimes]
    labeled_matrix = matrix.restrict(labeled)
    stress = labeled_matrix.column(h.cluster_feature)
    clusters = constrained_kmeans(
        stress,
        h.k,
        min_size=h.min_cluster_size,
        max_size=h.max_cluster_size,
        seed=seed,
        restarts=h.restarts,
    )
    cluster_by_key = {
        k: int(c) for k, c in zip(labeled_matrix.cell_keys, clusters.labels)
    }

    train_keys = [k for k in labeled_matrix.cell_keys if splits.get(k) == TRAIN]
    train = labeled_matrix.restrict(train_keys)
    X = train.select(cell_features).values
    y_log = np.log([lifetimes[k] for k in train.cell_keys])
    raw_ids = np.array([cluster_by_key[k] for k in train.cell_keys])
    # Clusters with no training cells cannot be fit; cells there are predicted
    # through the nearest trained centroid (flagged by posterior_predict).
    covered = sorted(set(raw_ids.tolist()))
    remap = {orig: new for new, orig in enumerate(covered)}
    cluster_ids = np.array([remap[c] for c in raw_ids])
    centroids = clusters.centroids[covered]
    cluster_by_key = {
        k: (remap[c] if c in remap else None) for k, c in cluster_by_key.items()
    }
    g_vectors = np.column_stack([np.ones(len(covered)), centroids])
    sampler = SamplerConfig(
        chains=h.chains, draws=h.draws, warmup=h.warmup, thin=h.thin
    )
    post = fit_hbm(
        X,
        y_log,
        cluster_ids,
        g_vectors,
        centroids=centroids,
        feature_names=cell_features,
        config=sampler,
        seed=seed,
    )
    artifact = HbmArtifact(
        posterior=post,
        clusters=clusters,
        cluster_by_key=cluster_by_key,
        cluster_feature=h.cluster_feature,
        cell_features=cell_features,
        features_csv=str(Path(h.features).resolve()),
    )
    out = Path(h.out)
    save_artifact(artifact, out)
    if h.summary:
        sizes = clusters.sizes()
        summary = {
            "k": clusters.k,
            "cluster_feature": h.cluster_feature,
            "centroids": [float(c) for c in clusters.centroids],
            "centroids_stress_sum_form": [float(2 * c) for c in clusters.centroids],
            "cluster_sizes": [int(s) for s in sizes],
            "sse": clusters.sse,
            "converged": post.converged,
            "cell_features": list(cell_features),
            "parameters": {
                name: {
                    "rhat": diag["rhat"],
                    "ess": diag["ess"],
                }
                for name, diag in post.diagnostics.items()
            },
            "theta_mean": [[float(v) for v in row] for row in post.theta.mean(axis=0)],
            "theta_std": [[float(v) for v in row] for row in post.theta.std(axis=0)],
            "sigma_j_mean": [float(v) for v in post.sigma_j.mean(axis=0)],
            "sigma_j_std": [float(v) for v in post.sigma_j.std(axis=0)],
        }
        write_json(summary, h.summary, provenance=provenance_line(cfg))
    return out


def stage_evaluate(cfg: PipelineConfig) -> Path:
    e = cfg.evaluate
    if not e.fits or not e.out:
        raise ConfigError("[evaluate] needs fits and out")
    fits_dir = Path(e.fits)
    out_dir = Path(e.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance_line(cfg)

    fit_files = sorted(fits_dir.glob("fit_*.json"))
    hbm_files = sorted(fits_dir.glob("*.bin"))
    if not fit_files and not hbm_files:
        raise StageError(f"evaluate: no fits found in {fits_dir}")

    features_csv = e.features
    if not features_csv:
        for p in fit_files:
            features_csv = json.loads(p.read_text()).get("features_csv", "")
            if features_csv:
                break
    if not features_csv:
        raise StageError("evaluate: no features.csv path (flag or recorded in fits)")
    matrix, lifetimes, splits = read_features_csv(features_csv)
    if e.splits:
        splits = read_splits_csv(e.splits).tags

    def split_arrays(preds: Mapping[CellKey, float]):
        by = {}
        for tag in SPLIT_TAGS:
            keys = [k for k in matrix.cell_keys
                    if splits.get(k) == tag and k in lifetimes and k in preds]
            by[tag] = (
                np.array([lifetimes[k] for k in keys]),
                np.array([preds[k] for k in keys]),
            )
        return by

    all_preds: list[ModelPredictions] = []
    labeled_keys = [k for k in matrix.cell_keys if k in lifetimes]
    for path in fit_files:
        payload = json.loads(path.read_text())
        model = payload["model"]
        if model == "dummy":
            preds = {k: payload["mean_weeks"] for k in labeled_keys}
            n_feat = 0
            name = "dummy"
        else:
            fit = ElasticNetFit(
                intercept=payload["intercept"],
                coefficients=np.array(payload["coefficients"]),
                feature_names=tuple(payload["features"]),
                alpha=payload["alpha"],
                lam=payload["lambda"],
                feature_means=np.array(payload["feature_means"]),
                feature_stds=np.array(payload["feature_stds"]),
            )
            sub = matrix.restrict(labeled_keys)
            values = predict_matrix(fit, sub)
            preds = dict(zip(sub.cell_keys, values))
            n_feat = payload["n_features"]
            name = model if model != "enet" else f"degradation_informed_{n_feat}"
        all_preds.append(
            ModelPredictions(model=name, n_features=n_feat, by_split=split_arrays(preds))
        )
        emit_pred_vs_true(preds, lifetimes, splits, out_dir / f"pred_vs_true_{name}.csv", prov)

    for path in hbm_files:
        artifact: HbmArtifact = load_artifact(path)
        rng = np.random.default_rng((cfg.hbm.seed or 0) + 1)
        preds: dict[CellKey, float] = {}
        intervals: dict[CellKey, tuple[int, float, float, float]] = {}
        sub = matrix.restrict(labeled_keys).select(artifact.cell_features)
        stress_col = matrix.restrict(labeled_keys).column(artifact.cluster_feature)
        for row, key in enumerate(sub.cell_keys):
            cid = artifact.cluster_by_key.get(key)
            summary = posterior_predict(
                artifact.posterior,
                cid,
                sub.values[row],
                stress_avg=float(stress_col[row]),
                rng=rng,
            )
            preds[key] = summary.mean_weeks
            intervals[key] = (
                summary.cluster_id,
                summary.mean_weeks,
                summary.lo_weeks,
                summary.hi_weeks,
            )
        n_feat = len(artifact.cell_features)
        name = f"hbm_{n_feat}"
        all_preds.append(
            ModelPredictions(model=name, n_features=n_feat, by_split=split_arrays(preds))
        )
        emit_pred_vs_true(preds, lifetimes, splits, out_dir / f"pred_vs_true_{name}.csv", prov)
        emit_hbm_intervals(intervals, lifetimes, out_dir / f"intervals_{name}.csv", prov)

    rows = comparison_table(all_preds)
    write_comparison_csv(rows, out_dir / "model_comparison.csv", prov)
    emit_lifetime_histogram(lifetimes, splits, out_dir / "lifetime_histogram.csv",
                            provenance=prov)

    scatter_names = set()
    for path in fit_files:
        payload = json.loads(path.read_text())
        scatter_names.update(payload.get("features", []))
    for name in sorted(scatter_names):
        if name not in matrix.feature_names:
            continue
        vals = {k: float(v) for k, v in zip(matrix.cell_keys, matrix.column(name))}
        safe = name.replace("/", "_")
        emit_feature_scatter(
            name, vals, lifetimes, splits, out_dir / f"scatter_{safe}.csv", prov
        )
    return out_dir


def stage_sweep(cfg: PipelineConfig) -> Path:
    s = cfg.sweep
    if not s.infile or not s.out:
        raise ConfigError("[sweep] needs in and out")
    dataset: CurveDataset = load_artifact(s.infile)
    pairs = []
    for token in s.pairs.split(","):
        token = token.strip()
        if not token:
            continue
        a, b = token.split(":")
        pairs.append((float(a), float(b)))
    lifetimes = {
        c.key: c.lifetime_weeks for c in dataset.cells if c.lifetime_weeks is not None
    }
    rows = week_pair_sweep(dataset, pairs, lifetimes, seed=require_seed(s.seed, "sweep"))
    out = Path(s.out)
    write_sweep_csv(rows, out, provenance=provenance_line(cfg))
    return out


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def _wire_defaults(cfg: PipelineConfig) -> PipelineConfig:
    """Fill unset stage paths from the run out_dir so `run` needs no plumbing."""
    out = Path(cfg.run.out_dir)
    if cfg.synth.out_dir and not cfg.ingest.manifest:
        cfg.ingest.manifest = str(Path(cfg.synth.out_dir) / "manifest.csv")
        cfg.ingest.data_dir = cfg.synth.out_dir
    cfg.ingest.out = cfg.ingest.out or str(out / "dataset.bin")
    cfg.curves.infile = cfg.curves.infile or cfg.ingest.out
    cfg.curves.out = cfg.curves.out or str(out / "curves.bin")
    cfg.features.infile = cfg.features.infile or cfg.curves.out
    cfg.features.out = cfg.features.out or str(out / "features.csv")
    cfg.features.windows_audit = cfg.features.windows_audit or str(out / "windows_audit.csv")
    cfg.select.features = cfg.select.features or cfg.features.out
    cfg.select.out = cfg.select.out or str(out / "trace.json")
    cfg.train.features = cfg.train.features or cfg.features.out
    cfg.train.select = cfg.train.select or cfg.select.out
    cfg.train.out_dir = cfg.train.out_dir or str(out / "fits")
    cfg.hbm.features = cfg.hbm.features or cfg.features.out
    cfg.hbm.out = cfg.hbm.out or str(out / "fits" / "hbm.bin")
    cfg.hbm.summary = cfg.hbm.summary or str(out / "posterior.json")
    cfg.evaluate.fits = cfg.evaluate.fits or str(out / "fits")
    cfg.evaluate.features = cfg.evaluate.features or cfg.features.out
    cfg.evaluate.out = cfg.evaluate.out or str(out / "report")
    cfg.sweep.infile = cfg.sweep.infile or cfg.curves.out
    cfg.sweep.out = cfg.sweep.out or str(out / "sweep.csv")
    return cfg


def _run_stage(name: str, out_dir: Path, sect, inputs: Sequence[Path], runner) -> list[Path]:
    """Run one stage with hash-based resume; returns its output paths."""
    sect_h = section_hash(sect)
    try:
        probe = runner(dry=True)
        if probe is not None and stage_is_current(out_dir, name, sect_h, inputs, probe):
            return [Path(p) for p in probe]
        outputs = runner(dry=False)
        record_stage(out_dir, name, sect_h, inputs, outputs)
        return [Path(p) for p in outputs]
    except (ConfigError,):
        raise
    except Exception as exc:
        raise StageError(f"stage {name!r} failed: {exc}") from exc


def run_pipeline(cfg: PipelineConfig) -> Path:
    """ingest -> curves -> features (+search) -> select -> train -> hbm -> evaluate.

    Stages whose config section and input hashes are unchanged are skipped;
    a failing stage halts the pipeline (partial outputs are preserved).
    """
    cfg = _wire_defaults(cfg)
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.synth.out_dir:
        synth_dir = Path(cfg.synth.out_dir)

        def synth_runner(dry: bool):
            manifest = synth_dir / "manifest.csv"
            if dry:
                if not manifest.exists():
                    return None
                files = sorted(synth_dir.glob("G*C*.csv"))
                return [manifest, synth_dir / "truth.csv", *files]
            stage_synth(cfg)
            files = sorted(synth_dir.glob("G*C*.csv"))
            return [manifest, synth_dir / "truth.csv", *files]

        _run_stage("synth", out_dir, cfg.synth, [], synth_runner)

    def ingest_runner(dry: bool):
        outs = [Path(cfg.ingest.out), Path(cfg.ingest.out).with_name("splits.csv")]
        if dry:
            return outs
        stage_ingest(cfg)
        return outs

    _run_stage(
        "ingest", out_dir, cfg.ingest,
        [Path(cfg.ingest.manifest), *sorted(Path(cfg.ingest.data_dir).glob("G*C*.csv"))],
        ingest_runner,
    )

    def curves_runner(dry: bool):
        outs = [Path(cfg.curves.out)]
        if dry:
            return outs
        stage_curves(cfg)
        return outs

    _run_stage("curves", out_dir, cfg.curves, [Path(cfg.curves.infile)], curves_runner)

    def features_runner(dry: bool):
        outs = [Path(cfg.features.out), Path(cfg.features.out).with_suffix(".meta.json")]
        if cfg.features.search_window and cfg.features.windows_audit:
            outs.append(Path(cfg.features.windows_audit))
        if dry:
            return outs
        stage_features(cfg)
        return outs

    _run_stage("features", out_dir, cfg.features, [Path(cfg.features.infile)], features_runner)

    def select_runner(dry: bool):
        outs = [Path(cfg.select.out), Path(cfg.select.out).with_suffix(".csv")]
        if dry:
            return outs
        stage_select(cfg)
        return outs

    _run_stage("select", out_dir, cfg.select, [Path(cfg.select.features)], select_runner)

    n_sel = cfg.train.n_features
    trace_features = load_trace_features(cfg.select.out, max(n_sel, 2))

    def train_runner(dry: bool):
        out_fits = Path(cfg.train.out_dir)
        outs = [
            out_fits / "fit_dummy.json",
            out_fits / "fit_conditions.json",
            out_fits / "fit_discharge.json",
            out_fits / f"fit_enet_{n_sel}.json",
        ]
        if dry:
            return outs
        for model in ("dummy", "conditions", "discharge", "enet"):
            stage_train(cfg, model)
        return outs

    _run_stage(
        "train", out_dir, cfg.train,
        [Path(cfg.train.features), Path(cfg.train.select)],
        train_runner,
    )

    if cfg.hbm.cell_features == "auto":
        cfg.hbm.cell_features = ",".join(trace_features[: max(n_sel, 2)])

    def hbm_runner(dry: bool):
        outs = [Path(cfg.hbm.out), Path(cfg.hbm.summary)]
        if dry:
            return outs
        stage_hbm(cfg)
        return outs

    _run_stage("hbm", out_dir, cfg.hbm, [Path(cfg.hbm.features)], hbm_runner)

    def evaluate_runner(dry: bool):
        if dry:
            return None  # cheap enough to always rerun; depends on many files
        out = stage_evaluate(cfg)
        return [out]

    _run_stage(
        "evaluate", out_dir, cfg.evaluate,
        [Path(cfg.evaluate.features)], evaluate_runner,
    )
    return Path(cfg.evaluate.out)
