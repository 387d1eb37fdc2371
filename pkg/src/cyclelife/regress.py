"""Point-estimate lifetime models: dummy, cycling-conditions, elastic net.

The elastic-net objective is

    ||y - b0 - X b||_2^2 + lam * ((1 - alpha)/2 * ||b||_2^2 + alpha * ||b||_1)

minimized by cyclic coordinate descent with soft-thresholding.  The
intercept is not penalized and features are standardized to zero mean/unit
variance on the training rows, so lam -> inf shrinks every coefficient to
zero and leaves the intercept at mean(y).  Targets are log lifetimes;
predictions are exponentiated back to weeks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import FeatureMatrix
from .selection import make_group_folds

CONDITION_FEATURES = ("cond.c_chg", "cond.c_dis", "cond.dod")

DEFAULT_ALPHAS = tuple(np.round(np.linspace(0.0, 1.0, 11), 2))
DEFAULT_LAMBDAS = tuple(np.logspace(-4, 1, 31))


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, objective: float):
        super().__init__(message)
        self.objective = objective


@dataclass(frozen=True)
class ElasticNetFit:
    """Coefficients live in standardized feature space; prediction applies
    (x - mean) / std, the linear map, then exp back to weeks."""

    intercept: float
    coefficients: np.ndarray
    feature_names: tuple[str, ...]
    alpha: float
    lam: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    n_sweeps: int = 0
    warning: Optional[str] = None
    target_scale: str = "log"


def _constant_columns(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    return sd <= 1e-12 * np.maximum(1.0, np.abs(mu))


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    const = _constant_columns(X)
    sd = np.where(const, 1.0, sd)
    Xs = (X - mu) / sd
    Xs[:, const] = 0.0  # keep float dust out of degenerate columns
    return Xs, mu, sd


def elastic_net_objective(
    Xs: np.ndarray, y: np.ndarray, beta0: float, beta: np.ndarray, alpha: float, lam: float
) -> float:
    r = y - beta0 - Xs @ beta
    return float(
        r @ r + lam * ((1 - alpha) / 2 * float(beta @ beta) + alpha * np.abs(beta).sum())
    )


def _soft(u: float, t: float) -> float:
    if u > t:
        return u - t
    if u < -t:
        return u + t
    return 0.0


def fit_elastic_net(
    X: np.ndarray,
    y: np.ndarray,
    alpha: float,
    lam: float,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    feature_names: Optional[Sequence[str]] = None,
    beta_init: Optional[np.ndarray] = None,
) -> ElasticNetFit:
    """Cyclic coordinate descent on the elastic-net objective.

    Converged when the largest coefficient change in a full sweep drops
    below ``tol``; raises ConvergenceError (carrying the latest objective
    value) if ``max_iter`` sweeps are not enough.  ``beta_init`` warm-starts
    the sweep (used by the hyperparameter grid search).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) aligned with y")
    n, p = X.shape
    if n < 2:
        raise ValueError("need >= 2 training rows")
    if not (0.0 <= alpha <= 1.0) or lam < 0:
        raise ValueError("alpha must be in [0, 1] and lam >= 0")
    if feature_names is None:
        feature_names = tuple(f"x{j}" for j in range(p))

    Xs, mu, sd = _standardize(X)
    yc = y - y.mean()
    col_sq = np.einsum("ij,ij->j", Xs, Xs)  # = n for non-degenerate columns

    beta = np.zeros(p) if beta_init is None else np.array(beta_init, dtype=float)
    resid = yc - Xs @ beta
    t = lam * alpha
    denom = 2.0 * col_sq + lam * (1 - alpha)
    warning = None
    for sweep in range(1, max_iter + 1):
        max_change = 0.0
        for jcol in range(p):
            bj = beta[jcol]
            xj = Xs[:, jcol]
            rho = 2.0 * float(xj @ resid) + 2.0 * col_sq[jcol] * bj
            if denom[jcol] == 0.0:
                new = 0.0
            else:
                new = _soft(rho, t) / denom[jcol]
            if new != bj:
                resid += xj * (bj - new)
                beta[jcol] = new
                max_change = max(max_change, abs(new - bj))
        if max_change < tol:
            break
    else:
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_iter} sweeps",
            elastic_net_objective(Xs, yc, 0.0, beta, alpha, lam),
        )
    if np.all(beta == 0.0) and p > 0 and np.all(_constant_columns(X)):
        warning = "all feature columns constant; intercept-only fit"
    return ElasticNetFit(
        intercept=float(y.mean()),
        coefficients=beta,
        feature_names=tuple(feature_names),
        alpha=float(alpha),
        lam=float(lam),
        feature_means=mu,
        feature_stds=sd,
        n_sweeps=sweep,
        warning=warning,
    )


def kkt_residuals(
    fit: ElasticNetFit, X: np.ndarray, y: np.ndarray
) -> tuple[float, float]:
    """(max |subgradient| excess over lam*alpha at zero coefficients,
    max stationarity residual at nonzero coefficients)."""
    Xs = (np.asarray(X, dtype=float) - fit.feature_means) / fit.feature_stds
    yc = np.asarray(y, dtype=float) - fit.intercept
    r = yc - Xs @ fit.coefficients
    grad_smooth = -2.0 * (Xs.T @ r) + fit.lam * (1 - fit.alpha) * fit.coefficients
    zero_viol = 0.0
    active_viol = 0.0
    for j, bj in enumerate(fit.coefficients):
        if bj == 0.0:
            zero_viol = max(zero_viol, abs(grad_smooth[j]) - fit.lam * fit.alpha)
        else:
            active_viol = max(
                active_viol, abs(grad_smooth[j] + fit.lam * fit.alpha * np.sign(bj))
            )
    return max(zero_viol, 0.0), active_viol


def predict_weeks(
    fit: ElasticNetFit, X_new: np.ndarray, feature_names: Optional[Sequence[str]] = None
) -> np.ndarray:
    """exp(b0 + x_std . b) per row; columns are aligned by name when given."""
    X_new = np.asarray(X_new, dtype=float)
    if feature_names is not None:
        feature_names = tuple(feature_names)
        if set(feature_names) != set(fit.feature_names):
            missing = set(fit.feature_names) - set(feature_names)
            raise ValueError(f"missing feature column(s): {sorted(missing)}")
        order = [feature_names.index(n) for n in fit.feature_names]
        X_new = X_new[:, order]
    elif X_new.shape[1] != len(fit.feature_names):
        raise ValueError("column count mismatch and no feature names to align by")
    Xs = (X_new - fit.feature_means) / fit.feature_stds
    return np.exp(fit.intercept + Xs @ fit.coefficients)


def predict_matrix(fit: ElasticNetFit, matrix: FeatureMatrix) -> np.ndarray:
    sub = matrix.select(fit.feature_names)
    return predict_weeks(fit, sub.values)


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TuneResult:
    alpha: float
    lam: float
    cv_table: tuple[tuple[float, float, float], ...]  # (alpha, lam, mean log-RMSE)


def cv_tune(
    X: np.ndarray,
    y: np.ndarray,
    groups: Sequence[int],
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    k: int = 5,
    repeats: int = 3,
    seed: int = 0,
    tol: float = 1e-7,
) -> TuneResult:
    """Grid search minimizing mean CV RMSE (log scale) over group folds.

    Ties go to the larger lambda (more regularization), then the smaller
    alpha; the scan order makes the tie-break deterministic.
    """
    if len(alphas) == 0 or len(lambdas) == 0:
        raise ValueError("alpha/lambda grids must be non-empty")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    folds = [f for _ in range(repeats) for f in make_group_folds(groups, k, rng)]

    lam_desc = sorted((float(l) for l in lambdas), reverse=True)
    errs: dict[tuple[float, float], list[float]] = {
        (float(a), l): [] for a in alphas for l in lam_desc
    }
    for alpha in alphas:
        for tr, va in folds:
            beta = None  # warm start down the lambda path within each fold
            for lam in lam_desc:
                fit = fit_elastic_net(X[tr], y[tr], alpha, lam, tol=tol, beta_init=beta)
                beta = fit.coefficients
                pred_log = np.log(predict_weeks(fit, X[va]))
                errs[(float(alpha), lam)].append(
                    float(np.sqrt(np.mean((y[va] - pred_log) ** 2)))
                )

    table = []
    best = None  # (mean, -lam, alpha) minimized
    for alpha in alphas:
        for lam in lam_desc:
            mean = float(np.mean(errs[(float(alpha), lam)]))
            table.append((float(alpha), lam, mean))
            key = (mean, -lam, float(alpha))
            if best is None or key < best[0]:
                best = (key, float(alpha), lam)
    return TuneResult(alpha=best[1], lam=best[2], cv_table=tuple(table))


def fit_tuned_elastic_net(
    matrix: FeatureMatrix,
    feature_names: Sequence[str],
    y_log: np.ndarray,
    groups: Sequence[int],
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    k: int = 5,
    repeats: int = 3,
    seed: int = 0,
) -> tuple[ElasticNetFit, TuneResult]:
    sub = matrix.select(feature_names)
    tune = cv_tune(sub.values, y_log, groups, alphas, lambdas, k=k, repeats=repeats, seed=seed)
    fit = fit_elastic_net(
        sub.values, y_log, tune.alpha, tune.lam, feature_names=feature_names
    )
    return fit, tune


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DummyModel:
    """Predicts the training-set mean lifetime (linear weeks) for every cell."""

    mean_weeks: float

    def predict(self, n: int) -> np.ndarray:
        return np.full(n, self.mean_weeks)


def dummy_model(train_lifetimes_weeks: Sequence[float]) -> DummyModel:
    lifetimes = np.asarray(train_lifetimes_weeks, dtype=float)
    if lifetimes.size < 1:
        raise ValueError("need at least one training lifetime")
    return DummyModel(mean_weeks=float(lifetimes.mean()))


def conditions_model(
    matrix: FeatureMatrix,
    y_log: np.ndarray,
    groups: Sequence[int],
    seed: int = 0,
    **tune_kwargs,
) -> tuple[ElasticNetFit, TuneResult]:
    """Elastic net restricted to the three cycling-condition features."""
    sub = matrix.select(CONDITION_FEATURES)
    if np.all(_constant_columns(sub.values)):
        fit = fit_elastic_net(
            sub.values, y_log, alpha=0.5, lam=1.0, feature_names=CONDITION_FEATURES
        )
        tune = TuneResult(alpha=0.5, lam=1.0, cv_table=())
        return fit, tune
    return fit_tuned_elastic_net(
        matrix, CONDITION_FEATURES, y_log, groups, seed=seed, **tune_kwargs
    )
