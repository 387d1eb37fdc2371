"""Stress-based clustering and the two-level hierarchical Bayesian model.

Clustering: constrained K-means on the average-stress feature, where the
assignment step is a min-cost transportation problem so minimum/maximum
cluster sizes are honored exactly.

Model (log-lifetime scale, features standardized on training rows):

    gamma   ~ Normal(gamma_mean, gamma_var) elementwise   (hyper prior)
    sigma   ~ HalfCauchy(1)
    theta_j = gamma^T g_j                                  (deterministic)
    sigma_j ~ HalfCauchy(sigma)
    y_ji    ~ Normal(theta_j . x_ji, sigma_j^2)

g_j is [1, cluster-j centroid stress] by default.  Inference is random-walk
Metropolis within Gibbs with per-parameter step adaptation during warmup;
positive scales are sampled on the log scale with the Jacobian term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .core import CellKey


# ---------------------------------------------------------------------------
# Constrained K-means
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    labels: np.ndarray          # per-cell cluster id in 0..k-1
    centroids: np.ndarray       # cluster mean stress values
    sse: float                  # sum of squared distances to assigned centroid
    min_size: int
    max_size: Optional[int]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def _transport_assign(
    values: np.ndarray, centroids: np.ndarray, min_size: int, max_size: int
) -> np.ndarray:
    """Size-bounded least-squares assignment via an LP with integral vertices."""
    n, k = values.shape[0], centroids.shape[0]
    cost = (values[:, None] - centroids[None, :]) ** 2  # n x k
    c = cost.ravel()
    a_eq = np.zeros((n, n * k))
    for i in range(n):
        a_eq[i, i * k : (i + 1) * k] = 1.0
    b_eq = np.ones(n)
    a_ub = np.zeros((2 * k, n * k))
    for j in range(k):
        a_ub[j, j::k] = 1.0        # size_j <= max
        a_ub[k + j, j::k] = -1.0   # -size_j <= -min
    b_ub = np.concatenate([np.full(k, float(max_size)), np.full(k, -float(min_size))])
    res = optimize.linprog(
        c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=(0, 1), method="highs-ds"
    )
    if not res.success:
        raise RuntimeError(f"assignment LP failed: {res.message}")
    x = res.x.reshape(n, k)
    labels = np.argmax(x, axis=1)
    if np.max(np.abs(x - np.eye(k)[labels])) > 1e-6:
        raise RuntimeError("assignment LP returned a fractional solution")
    return labels


def _lloyd_from(
    values: np.ndarray,
    centroids: np.ndarray,
    min_size: int,
    max_size: int,
    max_iter: int,
) -> tuple[np.ndarray, np.ndarray, float]:
    labels = None
    centroids = centroids.astype(float).copy()
    for _ in range(max_iter):
        new_labels = _transport_assign(values, centroids, min_size, max_size)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centroids.shape[0]):
            members = values[labels == j]
            if members.size:
                centroids[j] = members.mean()
    sse = float(((values - centroids[labels]) ** 2).sum())
    return labels, centroids, sse


def _kmeanspp_init(values: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [values[rng.integers(values.size)]]
    for _ in range(k - 1):
        d2 = np.min((values[:, None] - np.array(centroids)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(values[rng.integers(values.size)])
            continue
        centroids.append(values[rng.choice(values.size, p=d2 / total)])
    return np.array(centroids, dtype=float)


def constrained_kmeans(
    values: Sequence[float],
    k: int,
    min_size: int = 1,
    max_size: Optional[int] = None,
    seed: int = 0,
    restarts: int = 8,
    max_iter: int = 100,
    extra_inits: Sequence[np.ndarray] = (),
) -> ClusterAssignment:
    """Best-of-restarts constrained K-means on a 1-D feature.

    Every restart alternates an exact size-bounded assignment (min-cost
    transportation) with centroid updates until the assignment stabilizes,
    so for the final centroids no bound-respecting reassignment can lower
    the SSE.
    """
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    if k < 1 or n == 0:
        raise ValueError("need k >= 1 and non-empty values")
    eff_max = n if max_size is None else max_size
    if n < k * min_size:
        raise ValueError(f"infeasible bounds: {n} cells < k*min_size = {k * min_size}")
    if eff_max * k < n:
        raise ValueError(f"infeasible bounds: k*max_size = {k * eff_max} < {n} cells")

    rng = np.random.default_rng(seed)
    inits = [_kmeanspp_init(values, k, rng) for _ in range(restarts)]
    inits.extend(np.asarray(c, dtype=float) for c in extra_inits)

    best = None
    for init in inits:
        labels, centroids, sse = _lloyd_from(values, init, min_size, eff_max, max_iter)
        if best is None or sse < best[2] - 1e-12:
            best = (labels, centroids, sse)
    labels, centroids, sse = best
    # Canonical cluster ids: decreasing centroid stress (cluster 0 = highest).
    order = np.argsort(-centroids, kind="stable")
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    return ClusterAssignment(
        k=k,
        labels=remap[labels],
        centroids=centroids[order],
        sse=sse,
        min_size=min_size,
        max_size=max_size,
    )


def elbow_scan(
    values: Sequence[float],
    k_range: Sequence[int],
    min_size: int = 1,
    max_size: Optional[int] = None,
    seed: int = 0,
    restarts: int = 8,
) -> dict[int, float]:
    """SSE per k for elbow analysis.

    Each k additionally restarts from the previous best centroid set plus
    the worst-fit point, which makes the curve non-increasing in k under
    shared seeds/restarts.
    """
    values = np.asarray(values, dtype=float).ravel()
    out: dict[int, float] = {}
    prev: Optional[ClusterAssignment] = None
    for k in sorted(k_range):
        extra = []
        if prev is not None and prev.k == k - 1:
            dists = (values - prev.centroids[prev.labels]) ** 2
            sizes = prev.sizes()
            eligible = sizes[prev.labels] > max(1, min_size)
            cand = np.where(eligible, dists, -np.inf)
            far = values[int(np.argmax(cand))] if np.isfinite(cand).any() else values[
                int(np.argmax(dists))
            ]
            extra.append(np.concatenate([prev.centroids, [far]]))
        assign = constrained_kmeans(
            values, k, min_size=min_size, max_size=max_size, seed=seed,
            restarts=restarts, extra_inits=extra,
        )
        out[k] = assign.sse
        prev = assign
    return out


# ---------------------------------------------------------------------------
# Hierarchical Bayesian model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HbmPriors:
    gamma_mean: np.ndarray  # (q, p)
    gamma_var: float = 10.0
    sigma_scale: float = 1.0


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    draws: int = 20_000       # total iterations per chain, warmup included
    warmup: int = 10_000
    thin: int = 5
    adapt_window: int = 50
    target_accept: float = 0.3
    initial_step: float = 0.1
    rhat_threshold: float = 1.05
    fix_sigma: Optional[float] = None
    fix_sigma_j: Optional[Sequence[float]] = None


@dataclass
class HbmPosterior:
    """Kept posterior draws, aligned across parameters by draw index."""

    gamma: np.ndarray        # (draws, q, p)
    sigma: np.ndarray        # (draws,)
    sigma_j: np.ndarray      # (draws, J)
    theta: np.ndarray        # (draws, J, p)
    g_vectors: np.ndarray    # (J, q)
    centroids: np.ndarray    # (J,)
    feature_names: tuple[str, ...]
    feature_means: np.ndarray
    feature_stds: np.ndarray
    priors: HbmPriors
    chains: int
    diagnostics: dict[str, dict[str, float]]  # param -> {"rhat":, "ess":}
    converged: bool

    def draws_per_chain(self) -> int:
        return self.gamma.shape[0] // self.chains


def _log_half_cauchy(x: float, scale: float) -> float:
    if x <= 0 or scale <= 0:
        return -math.inf
    return math.log(2.0 / math.pi) - math.log(scale) - math.log1p((x / scale) ** 2)


def split_rhat(x: np.ndarray) -> float:
    """Split-chain potential scale reduction; x has shape (chains, draws)."""
    c, n = x.shape
    if n < 4:
        return float("nan")
    half = n // 2
    seqs = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    m, n2 = seqs.shape
    means = seqs.mean(axis=1)
    w = seqs.var(axis=1, ddof=1).mean()
    b = n2 * means.var(ddof=1)
    if w <= 0:
        return 1.0
    var_hat = (n2 - 1) / n2 * w + b / n2
    return float(math.sqrt(var_hat / w))


def effective_sample_size(x: np.ndarray) -> float:
    """Combined ESS from per-chain autocorrelations (Geyer initial positive)."""
    c, n = x.shape
    if n < 8:
        return float(c * n)
    acf = np.zeros(n)
    for chain in x:
        d = chain - chain.mean()
        f = np.fft.rfft(d, 2 * n)
        ac = np.fft.irfft(f * np.conj(f))[:n].real
        if ac[0] <= 0:
            return float(c * n)
        acf += ac / ac[0]
    acf /= c
    # sum consecutive pairs until one goes negative
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = acf[t] + acf[t + 1]
        if pair < 0:
            break
        tau += 2 * pair
        t += 2
    return float(c * n / max(tau, 1.0))


def _run_chain(
    seed_seq: np.random.SeedSequence,
    suff: list[tuple[np.ndarray, np.ndarray, float, int]],
    g_vectors: np.ndarray,
    priors: HbmPriors,
    config: SamplerConfig,
) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed_seq)
    G = g_vectors                      # (J, q)
    J, q = G.shape
    p = priors.gamma_mean.shape[1]
    gv = priors.gamma_var
    gm = priors.gamma_mean

    fix_sigma = config.fix_sigma
    fix_sigma_j = (
        None if config.fix_sigma_j is None else np.asarray(config.fix_sigma_j, dtype=float)
    )

    def loglik(theta_row: np.ndarray, sigma_j: float, j: int) -> float:
        a, b, cc, n_j = suff[j]
        ssr = float(theta_row @ a @ theta_row - 2.0 * (b @ theta_row) + cc)
        return -n_j * math.log(sigma_j) - ssr / (2.0 * sigma_j**2)

    def log_post(gamma: np.ndarray, u: float, u_j: np.ndarray) -> float:
        sigma = math.exp(u)
        lp = -(((gamma - gm) ** 2).sum()) / (2.0 * gv)
        if fix_sigma is None:
            lp += _log_half_cauchy(sigma, priors.sigma_scale) + u  # log-scale Jacobian
        theta = G @ gamma              # (J, p)
        for j in range(J):
            sj = math.exp(u_j[j])
            if fix_sigma_j is None:
                lp += _log_half_cauchy(sj, sigma) + u_j[j]
            lp += loglik(theta[j], sj, j)
        return lp

    # Initial state: prior mean with a small seeded jitter.
    gamma = gm + 0.05 * rng.standard_normal(gm.shape)
    u = math.log(fix_sigma if fix_sigma is not None else 0.5)
    if fix_sigma_j is not None:
        u_j = np.log(fix_sigma_j).astype(float)
    else:
        u_j = np.full(J, math.log(0.3))

    n_gamma = q * p
    sample_sigma = fix_sigma is None
    sample_sigma_j = fix_sigma_j is None
    n_params = n_gamma + (1 if sample_sigma else 0) + (J if sample_sigma_j else 0)
    steps = np.full(n_params, config.initial_step)
    accepts = np.zeros(n_params)
    proposals = np.zeros(n_params)

    current_lp = log_post(gamma, u, u_j)
    kept_gamma, kept_sigma, kept_sigma_j = [], [], []
    for it in range(config.draws):
        adapting = it < config.warmup
        pi = 0
        for a in range(n_gamma):
            prop = gamma.copy()
            prop.flat[a] += steps[pi] * rng.standard_normal()
            lp = log_post(prop, u, u_j)
            proposals[pi] += 1
            if math.log(rng.random()) < lp - current_lp:
                gamma, current_lp = prop, lp
                accepts[pi] += 1
            pi += 1
        if sample_sigma:
            prop_u = u + steps[pi] * rng.standard_normal()
            lp = log_post(gamma, prop_u, u_j)
            proposals[pi] += 1
            if math.log(rng.random()) < lp - current_lp:
                u, current_lp = prop_u, lp
                accepts[pi] += 1
            pi += 1
        if sample_sigma_j:
            for j in range(J):
                prop_uj = u_j.copy()
                prop_uj[j] += steps[pi] * rng.standard_normal()
                lp = log_post(gamma, u, prop_uj)
                proposals[pi] += 1
                if math.log(rng.random()) < lp - current_lp:
                    u_j, current_lp = prop_uj, lp
                    accepts[pi] += 1
                pi += 1
        if adapting and (it + 1) % config.adapt_window == 0:
            rates = accepts / np.maximum(proposals, 1)
            steps *= np.exp(np.clip(rates - config.target_accept, -0.5, 0.5))
            steps = np.clip(steps, 1e-6, 10.0)
            accepts[:] = 0
            proposals[:] = 0
        if not adapting and (it - config.warmup) % config.thin == 0:
            kept_gamma.append(gamma.copy())
            kept_sigma.append(math.exp(u))
            kept_sigma_j.append(np.exp(u_j))
    return {
        "gamma": np.array(kept_gamma),
        "sigma": np.array(kept_sigma),
        "sigma_j": np.array(kept_sigma_j),
    }


def fit_hbm(
    X: np.ndarray,
    y_log: np.ndarray,
    cluster_ids: Sequence[int],
    g_vectors: np.ndarray,
    centroids: np.ndarray,
    feature_names: Sequence[str],
    priors: Optional[HbmPriors] = None,
    config: SamplerConfig = SamplerConfig(),
    seed: int = 0,
) -> HbmPosterior:
    """Sample the joint posterior of (gamma, sigma, {sigma_j}).

    X holds raw cell-level features (standardized here, an intercept column
    is prepended), y_log the log lifetimes, cluster_ids the per-row cluster,
    g_vectors the (J, q) condition-level design.  gamma_mean defaults to the
    pooled OLS solution stacked on the g intercept row (empirical Bayes).
    Chains run independently from spawned seeds and are merged by chain
    index; a split-Rhat above the threshold flags (not fails) the fit.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y_log, dtype=float)
    cluster_ids = np.asarray(cluster_ids, dtype=int)
    g_vectors = np.asarray(g_vectors, dtype=float)
    J, q = g_vectors.shape
    if cluster_ids.min() < 0 or cluster_ids.max() >= J:
        raise ValueError("cluster id outside 0..J-1")
    for j in range(J):
        if not np.any(cluster_ids == j):
            raise ValueError(f"training cluster {j} is empty")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd == 0, 1.0, sd)
    Xs = np.column_stack([np.ones(len(X)), (X - mu) / sd])
    p = Xs.shape[1]

    if priors is None:
        pooled, *_ = np.linalg.lstsq(Xs, y, rcond=None)
        gamma_mean = np.zeros((q, p))
        gamma_mean[0, :] = pooled
        priors = HbmPriors(gamma_mean=gamma_mean)
    if priors.gamma_mean.shape != (q, p):
        raise ValueError(f"gamma_mean must have shape {(q, p)}")

    suff = []
    for j in range(J):
        rows = cluster_ids == j
        Xj, yj = Xs[rows], y[rows]
        suff.append((Xj.T @ Xj, Xj.T @ yj, float(yj @ yj), int(rows.sum())))

    seeds = np.random.SeedSequence(seed).spawn(config.chains)
    chains = [_run_chain(s, suff, g_vectors, priors, config) for s in seeds]

    gamma = np.concatenate([c["gamma"] for c in chains])
    sigma = np.concatenate([c["sigma"] for c in chains])
    sigma_j = np.concatenate([c["sigma_j"] for c in chains])
    theta = np.einsum("jq,dqp->djp", g_vectors, gamma)

    per_chain = chains[0]["gamma"].shape[0]
    diagnostics: dict[str, dict[str, float]] = {}
    worst_rhat = 1.0

    def diag(name: str, series: np.ndarray) -> None:
        nonlocal worst_rhat
        arr = series.reshape(config.chains, per_chain)
        r = split_rhat(arr)
        diagnostics[name] = {"rhat": r, "ess": effective_sample_size(arr)}
        if np.isfinite(r):
            worst_rhat = max(worst_rhat, r)

    for a in range(q):
        for b in range(p):
            diag(f"gamma[{a},{b}]", gamma[:, a, b])
    if config.fix_sigma is None:
        diag("sigma", sigma)
    if config.fix_sigma_j is None:
        for j in range(J):
            diag(f"sigma_j[{j}]", sigma_j[:, j])

    return HbmPosterior(
        gamma=gamma,
        sigma=sigma,
        sigma_j=sigma_j,
        theta=theta,
        g_vectors=g_vectors,
        centroids=np.asarray(centroids, dtype=float),
        feature_names=tuple(feature_names),
        feature_means=mu,
        feature_stds=sd,
        priors=priors,
        chains=config.chains,
        diagnostics=diagnostics,
        converged=bool(worst_rhat <= config.rhat_threshold),
    )


def sample_prior(
    priors: HbmPriors, n_clusters: int, n_draws: int, seed: int = 0
) -> dict[str, np.ndarray]:
    """Direct draws from the hyper priors (HalfCauchy via scale * |Cauchy|)."""
    rng = np.random.default_rng(seed)
    q, p = priors.gamma_mean.shape
    gamma = priors.gamma_mean + math.sqrt(priors.gamma_var) * rng.standard_normal(
        (n_draws, q, p)
    )
    sigma = priors.sigma_scale * np.abs(rng.standard_cauchy(n_draws))
    sigma_j = sigma[:, None] * np.abs(rng.standard_cauchy((n_draws, n_clusters)))
    return {"gamma": gamma, "sigma": sigma, "sigma_j": sigma_j}


# ---------------------------------------------------------------------------
# Posterior prediction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionSummary:
    mean_weeks: float
    lo_weeks: float       # mean - 2 std of exponentiated draws
    hi_weeks: float
    std_weeks: float
    cluster_id: int
    fallback: bool = False  # True when the cluster was mapped by nearest centroid


def nearest_cluster(post: HbmPosterior, stress_avg: float) -> int:
    return int(np.argmin(np.abs(post.centroids - stress_avg)))


def posterior_predict(
    post: HbmPosterior,
    cluster_id: Optional[int],
    x_raw: Sequence[float],
    stress_avg: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    seed: int = 0,
) -> PredictionSummary:
    """Monte Carlo posterior predictive summary on the week scale.

    For every kept draw, y* ~ Normal(theta_j . x, sigma_j^2) on the log
    scale; the summary is the mean and +-2 std of the exponentiated draws.
    A cluster id the training run never saw falls back to the nearest
    centroid by ``stress_avg`` (flagged in the result).
    """
    if post.gamma.shape[0] == 0:
        raise ValueError("empty posterior")
    fallback = False
    J = post.g_vectors.shape[0]
    if cluster_id is None or not (0 <= cluster_id < J):
        if stress_avg is None:
            raise ValueError("unseen cluster id and no stress_avg for centroid fallback")
        cluster_id = nearest_cluster(post, stress_avg)
        fallback = True
    if rng is None:
        rng = np.random.default_rng(seed)
    x = np.asarray(x_raw, dtype=float)
    xs = np.concatenate([[1.0], (x - post.feature_means) / post.feature_stds])
    mean_log = post.theta[:, cluster_id, :] @ xs
    draws_log = mean_log + post.sigma_j[:, cluster_id] * rng.standard_normal(mean_log.size)
    weeks = np.exp(draws_log)
    mean = float(weeks.mean())
    std = float(weeks.std())
    return PredictionSummary(
        mean_weeks=mean,
        lo_weeks=mean - 2.0 * std,
        hi_weeks=mean + 2.0 * std,
        std_weeks=std,
        cluster_id=cluster_id,
        fallback=fallback,
    )
