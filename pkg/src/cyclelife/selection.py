"""Stepwise forward feature selection under repeated group-stratified CV.

The inner model is plain OLS on the log-lifetime target; regularization is
tuned separately after the feature set is fixed.  Folds always keep all
cells of a group together, mirroring the group-level train/test partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import FeatureMatrix


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 5
    repeats: int = 5
    max_features: int = 10
    metric_scale: str = "log"


@dataclass(frozen=True)
class SelectionStep:
    feature: str
    cv_rmse_mean: float
    cv_rmse_std: float
    runner_up: tuple[tuple[str, float], ...]  # next-best (feature, mean) pairs


@dataclass(frozen=True)
class SelectionTrace:
    steps: tuple[SelectionStep, ...]
    config: SelectionConfig

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(s.feature for s in self.steps)


def make_group_folds(
    groups: Sequence[int], k: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """k folds whose validation sets are unions of whole groups.

    Groups are shuffled then greedily assigned to the currently smallest
    fold, which balances fold sizes when group sizes vary.
    """
    groups = np.asarray(groups)
    unique = sorted(set(groups.tolist()))
    if len(unique) < k:
        raise ValueError(f"need >= {k} groups for {k}-fold group CV, got {len(unique)}")
    order = [unique[i] for i in rng.permutation(len(unique))]
    fold_groups: list[list[int]] = [[] for _ in range(k)]
    fold_sizes = np.zeros(k, dtype=int)
    for g in order:
        size = int((groups == g).sum())
        j = int(np.argmin(fold_sizes))
        fold_groups[j].append(g)
        fold_sizes[j] += size
    folds = []
    all_idx = np.arange(len(groups))
    for gs in fold_groups:
        val = np.isin(groups, gs)
        folds.append((all_idx[~val], all_idx[val]))
    return folds


def _ols_fold_rmse(X: np.ndarray, y: np.ndarray, train: np.ndarray, val: np.ndarray) -> float:
    """RMSE of OLS fit on the fold's training rows, scored on its validation rows.

    Standardization statistics come from the training rows only.  A rank-
    deficient design is penalized with +inf rather than silently solved.
    """
    Xt, Xv = X[train], X[val]
    mu = Xt.mean(axis=0)
    sd = Xt.std(axis=0)
    sd = np.where(sd == 0, 1.0, sd)
    Xt = (Xt - mu) / sd
    Xv = (Xv - mu) / sd
    At = np.column_stack([np.ones(len(Xt)), Xt])
    coef, _res, rank, _sv = np.linalg.lstsq(At, y[train], rcond=None)
    if rank < At.shape[1]:
        return float("inf")
    pred = np.column_stack([np.ones(len(Xv)), Xv]) @ coef
    return float(np.sqrt(np.mean((y[val] - pred) ** 2)))


def cv_rmse_for_subset(
    X: np.ndarray, y: np.ndarray, folds: Sequence[tuple[np.ndarray, np.ndarray]]
) -> np.ndarray:
    """Per-fold OLS RMSE for a fixed column subset (columns already selected)."""
    return np.array([_ols_fold_rmse(X, y, tr, va) for tr, va in folds])


def forward_select(
    matrix: FeatureMatrix,
    targets_log: np.ndarray,
    groups: Sequence[int],
    k: int = 5,
    repeats: int = 5,
    max_features: int = 10,
    seed: int = 0,
    n_runner_up: int = 3,
) -> SelectionTrace:
    """Greedy forward search: at each step add the feature whose addition
    minimizes the mean CV RMSE over repeats x k group-stratified folds.
    """
    X = matrix.values
    y = np.asarray(targets_log, dtype=float)
    if X.shape[0] < k:
        raise ValueError(f"matrix has {X.shape[0]} rows, fewer than k={k}")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("NaN/Inf in selection inputs")
    groups = np.asarray(groups)
    if groups.shape[0] != X.shape[0]:
        raise ValueError("groups length must match matrix rows")

    rng = np.random.default_rng(seed)
    fold_sets = [make_group_folds(groups, k, rng) for _ in range(repeats)]
    all_folds = [f for folds in fold_sets for f in folds]

    chosen: list[int] = []
    steps: list[SelectionStep] = []
    names = matrix.feature_names
    for _ in range(min(max_features, len(names))):
        results: list[tuple[float, float, int]] = []  # (mean, std, col)
        for col in range(len(names)):
            if col in chosen:
                continue
            scores = cv_rmse_for_subset(X[:, chosen + [col]], y, all_folds)
            finite = scores[np.isfinite(scores)]
            mean = float(scores.mean()) if finite.size == scores.size else float("inf")
            std = float(scores.std()) if finite.size == scores.size else float("inf")
            results.append((mean, std, col))
        results.sort(key=lambda t: (t[0], t[2]))  # ties -> lower column index
        best_mean, best_std, best_col = results[0]
        chosen.append(best_col)
        steps.append(
            SelectionStep(
                feature=names[best_col],
                cv_rmse_mean=best_mean,
                cv_rmse_std=best_std,
                runner_up=tuple(
                    (names[c], m) for m, _s, c in results[1 : 1 + n_runner_up]
                ),
            )
        )
    return SelectionTrace(
        steps=tuple(steps),
        config=SelectionConfig(k=k, repeats=repeats, max_features=max_features),
    )


@dataclass(frozen=True)
class FeatureCountChoice:
    n_selected: int
    candidates: tuple[int, ...]  # lowest-mean and lowest-std step counts


def pick_feature_count(trace: SelectionTrace, policy: str = "one_std") -> FeatureCountChoice:
    """Choose how many of the ranked features to keep.

    Default policy: the smallest n whose mean CV RMSE is within one standard
    deviation of the global minimum mean.  The lowest-mean and lowest-std
    step counts are both reported so the two natural candidates can be
    compared side by side.
    """
    if not trace.steps:
        raise ValueError("empty selection trace")
    means = np.array([s.cv_rmse_mean for s in trace.steps])
    stds = np.array([s.cv_rmse_std for s in trace.steps])
    n_min_mean = int(np.argmin(means)) + 1
    n_min_std = int(np.argmin(stds)) + 1
    candidates = tuple(sorted({n_min_mean, n_min_std}))
    if policy == "min_mean":
        return FeatureCountChoice(n_selected=n_min_mean, candidates=candidates)
    if policy != "one_std":
        raise ValueError(f"unknown policy {policy!r}")
    threshold = means[n_min_mean - 1] + stds[n_min_mean - 1]
    for n in range(1, len(means) + 1):
        if means[n - 1] <= threshold:
            return FeatureCountChoice(n_selected=n, candidates=candidates)
    return FeatureCountChoice(n_selected=len(means), candidates=candidates)
