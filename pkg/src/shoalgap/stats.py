"""Distributional comparison statistics.

Everything here is nonparametric and resampling-based: 1-Wasserstein
distances on empirical distributions, percentile bootstrap intervals,
label-permutation tests, Cliff's delta, Kruskal-Wallis, Holm correction,
trial-level gap matrices with a two-way cluster bootstrap, negative
binomial trend regression with cluster-robust errors, and a variance
ratio separating group effects from seed noise. All randomness flows
through explicit RngStream arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import RngStream


class StatsError(ValueError):
    pass


def _as_sample(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise StatsError(f"{name} sample is empty")
    if not np.all(np.isfinite(arr)):
        raise StatsError(f"{name} sample contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# 1-Wasserstein distance


def wasserstein1(x, y) -> float:
    """W1 between two empirical distributions (exact quantile integral).

    Equal sample sizes reduce to the mean absolute difference of sorted
    samples; unequal sizes integrate |F_x - F_y| over the merged support.
    """
    xs = np.sort(_as_sample(x, "x"))
    ys = np.sort(_as_sample(y, "y"))
    if xs.size == ys.size:
        return float(np.mean(np.abs(xs - ys)))
    pooled = np.concatenate([xs, ys])
    pooled.sort(kind="mergesort")
    gaps = np.diff(pooled)
    cdf_x = np.searchsorted(xs, pooled[:-1], side="right") / xs.size
    cdf_y = np.searchsorted(ys, pooled[:-1], side="right") / ys.size
    return float(np.sum(np.abs(cdf_x - cdf_y) * gaps))


# ---------------------------------------------------------------------------
# Bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    low: float
    high: float
    replicates: np.ndarray

    @property
    def median(self) -> float:
        """Median of the bootstrap distribution (used as a robust point estimate)."""
        return float(np.median(self.replicates))


def bootstrap_ci(x, y, statistic: Callable[[np.ndarray, np.ndarray], float] = wasserstein1,
                 n_boot: int = 5000, level: float = 0.95, rng: RngStream | None = None) -> BootstrapResult:
    """Percentile bootstrap for a two-sample statistic, resampling each group."""
    if n_boot < 100:
        raise StatsError(f"n_boot={n_boot} is too small for a percentile interval (need >= 100)")
    if rng is None:
        rng = RngStream(0)
    xs = _as_sample(x, "x")
    ys = _as_sample(y, "y")
    idx_x = rng.integers(0, xs.size, size=(n_boot, xs.size))
    idx_y = rng.integers(0, ys.size, size=(n_boot, ys.size))
    reps = np.empty(n_boot)
    for b in range(n_boot):
        reps[b] = statistic(xs[idx_x[b]], ys[idx_y[b]])
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(reps, [alpha, 1.0 - alpha])
    return BootstrapResult(float(low), float(high), reps)


# ---------------------------------------------------------------------------
# Permutation test


def _w1_label_sweep(pooled_sorted: np.ndarray, labels: np.ndarray, n_x: int, n_y: int) -> np.ndarray:
    """W1 for each row of `labels` (1 marks membership in group x).

    The pooled sorted values are shared by every permutation; only label
    assignments vary, so each W1 is a prefix-sum sweep, no per-row sorting.
    """
    gaps = np.diff(pooled_sorted)
    cum_x = np.cumsum(labels[:, :-1], axis=1)
    ranks = np.arange(1, pooled_sorted.size)
    cdf_x = cum_x / n_x
    cdf_y = (ranks - cum_x) / n_y
    return np.abs(cdf_x - cdf_y) @ gaps


def permutation_test(x, y, n_perm: int = 100_000, rng: RngStream | None = None) -> float:
    """One-sided (upper tail) permutation p-value for the W1 distance.

    Group labels are permuted across the pooled samples with group sizes
    preserved; p uses the add-one estimator (1 + exceedances) / (n_perm + 1).
    """
    if rng is None:
        rng = RngStream(0)
    xs = _as_sample(x, "x")
    ys = _as_sample(y, "y")
    w_obs = wasserstein1(xs, ys)
    n, m = xs.size, ys.size
    pooled = np.concatenate([xs, ys])
    order = np.argsort(pooled, kind="mergesort")
    pooled_sorted = pooled[order]
    base_labels = np.zeros(n + m, dtype=np.int64)
    base_labels[:n] = 1
    exceed = 0
    chunk = max(1, int(4_000_000 // (n + m)))
    done = 0
    gen = rng.generator
    while done < n_perm:
        k = min(chunk, n_perm - done)
        labels = gen.permuted(np.tile(base_labels, (k, 1)), axis=1)
        w_perm = _w1_label_sweep(pooled_sorted, labels, n, m)
        exceed += int(np.sum(w_perm >= w_obs - 1e-12))
        done += k
    return (1 + exceed) / (n_perm + 1)


# ---------------------------------------------------------------------------
# Effect size


CLIFFS_THRESHOLDS = ((0.147, "negligible"), (0.33, "small"), (0.474, "medium"))


def cliffs_delta(x, y) -> tuple[float, str]:
    """Cliff's delta P(x > y) - P(x < y) with a conventional magnitude label."""
    xs = _as_sample(x, "x")
    ys = np.sort(_as_sample(y, "y"))
    greater = np.searchsorted(ys, xs, side="left").sum()
    less_eq = np.searchsorted(ys, xs, side="right").sum()
    n_pairs = xs.size * ys.size
    less = n_pairs - less_eq
    delta = (int(greater) - int(less)) / n_pairs
    mag = abs(delta)
    for threshold, label in CLIFFS_THRESHOLDS:
        if mag < threshold:
            return float(delta), label
    return float(delta), "large"


# ---------------------------------------------------------------------------
# Chi-squared tail via regularized incomplete gamma (series + continued fraction)

_GAMMA_EPS = 1e-15
_GAMMA_MAX_ITER = 10_000


def _gamma_p_series(a: float, x: float) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_GAMMA_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_upper_reg(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x), abs error < 1e-10."""
    if a <= 0 or x < 0:
        raise StatsError(f"gammainc_upper_reg needs a > 0, x >= 0; got a={a}, x={x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi2_sf(x: float, df: float) -> float:
    """Upper-tail probability of a chi-squared distribution."""
    if x <= 0:
        return 1.0
    return gammainc_upper_reg(df / 2.0, x / 2.0)


# ---------------------------------------------------------------------------
# Kruskal-Wallis


def _rank_with_ties(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Average ranks (1-based) and the tie-correction divisor."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    tie_sum = 0.0
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        avg_rank = (i + j) / 2.0 + 1.0
        ranks[order[i:j + 1]] = avg_rank
        run = j - i + 1
        if run > 1:
            tie_sum += run ** 3 - run
        i = j + 1
    n = values.size
    correction = 1.0 - tie_sum / (n ** 3 - n) if n > 1 else 1.0
    return ranks, correction


def kruskal_wallis(groups: Sequence[np.ndarray]) -> tuple[float, float]:
    """Rank-based omnibus H with tie correction; p from the chi-squared tail."""
    if len(groups) < 2:
        raise StatsError("kruskal_wallis needs at least two groups")
    samples = [_as_sample(g, f"group {i}") for i, g in enumerate(groups)]
    pooled = np.concatenate(samples)
    n = pooled.size
    ranks, correction = _rank_with_ties(pooled)
    if correction == 0.0:
        return 0.0, 1.0  # every observation identical
    h = 0.0
    start = 0
    for sample in samples:
        r = ranks[start:start + sample.size]
        h += sample.size * (r.mean() - (n + 1) / 2.0) ** 2
        start += sample.size
    h *= 12.0 / (n * (n + 1))
    h /= correction
    return float(h), chi2_sf(h, len(samples) - 1)


# ---------------------------------------------------------------------------
# Holm step-down correction


def holm_correct(p_values: Sequence[float]) -> list[float]:
    """Step-down Holm adjustment with monotonicity enforcement."""
    ps = np.asarray(p_values, dtype=float)
    if np.any((ps < 0) | (ps > 1)):
        raise StatsError("p-values must lie in [0, 1]")
    k = ps.size
    order = np.argsort(ps, kind="mergesort")
    adjusted = np.empty(k)
    running_max = 0.0
    for rank, idx in enumerate(order):
        adj = min(1.0, (k - rank) * ps[idx])
        running_max = max(running_max, adj)
        adjusted[idx] = running_max
    return adjusted.tolist()


# ---------------------------------------------------------------------------
# Trial-level gap with two-way cluster bootstrap


@dataclass(frozen=True)
class TrialPairGap:
    matrix: np.ndarray  # pairwise W1, rows = first group's trials, cols = second's
    median: float
    ci_low: float
    ci_high: float
    n_boot: int


def trial_level_gap(sim_trials: Sequence[np.ndarray], real_trials: Sequence[np.ndarray],
                    rng: RngStream | None = None, n_boot: int = 5000,
                    level: float = 0.95) -> TrialPairGap:
    """Median pairwise trial-level W1 with a two-way cluster bootstrap CI.

    Entries of the pairwise matrix share trials, so the CI resamples row
    and column indices with replacement and recomputes the median.
    """
    if len(sim_trials) < 1 or len(real_trials) < 1:
        raise StatsError("trial_level_gap needs at least one trial per side")
    if rng is None:
        rng = RngStream(0)
    n_r = len(sim_trials)
    n_c = len(real_trials)
    d = np.empty((n_r, n_c))
    sorted_sim = [np.sort(_as_sample(t, f"sim trial {i}")) for i, t in enumerate(sim_trials)]
    sorted_real = [np.sort(_as_sample(t, f"real trial {j}")) for j, t in enumerate(real_trials)]
    for i, si in enumerate(sorted_sim):
        for j, rj in enumerate(sorted_real):
            if si.size == rj.size:
                d[i, j] = np.mean(np.abs(si - rj))
            else:
                d[i, j] = wasserstein1(si, rj)
    rows = rng.integers(0, n_r, size=(n_boot, n_r))
    cols = rng.integers(0, n_c, size=(n_boot, n_c))
    reps = np.empty(n_boot)
    for b in range(n_boot):
        reps[b] = np.median(d[np.ix_(rows[b], cols[b])])
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(reps, [alpha, 1.0 - alpha])
    return TrialPairGap(d, float(np.median(d)), float(low), float(high), n_boot)


# ---------------------------------------------------------------------------
# Min-max normalization


def minmax_normalize(values) -> np.ndarray:
    """Map values to [0, 1] by (v - min) / (max - min); all-equal maps to 0."""
    arr = np.asarray(values, dtype=float)
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Negative binomial trend regression (log link, cluster-robust errors)


@dataclass(frozen=True)
class NBRegressionResult:
    rate_ratio: float
    ci_low: float
    ci_high: float
    p_value: float
    dispersion: float  # NB size parameter theta; Var = mu + mu^2 / theta
    n_clusters: int
    coef: np.ndarray = field(repr=False)
    se: float = field(repr=False, default=float("nan"))


def _norm_ppf(p: float) -> float:
    """Inverse standard normal CDF (Acklam's rational approximation, |err| < 1.2e-9)."""
    if not 0.0 < p < 1.0:
        raise StatsError(f"norm_ppf needs p in (0, 1), got {p}")
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    if p > 1.0 - p_low:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)


def _norm_sf2(z: float) -> float:
    """Two-sided normal tail probability."""
    return math.erfc(abs(z) / math.sqrt(2.0))


def _irls(x: np.ndarray, y: np.ndarray, alpha: float, max_iter: int = 100,
          tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """IRLS for a log-link count GLM; alpha = 1/theta (0 gives Poisson)."""
    beta = np.zeros(x.shape[1])
    beta[0] = math.log(max(y.mean(), 1e-8))
    for _ in range(max_iter):
        eta = np.clip(x @ beta, -30.0, 30.0)
        mu = np.exp(eta)
        w = mu / (1.0 + alpha * mu)
        z = eta + (y - mu) / mu
        xtw = x.T * w
        try:
            new_beta = np.linalg.solve(xtw @ x, xtw @ z)
        except np.linalg.LinAlgError as exc:
            raise StatsError(f"IRLS normal equations singular: {exc}") from None
        if not np.all(np.isfinite(new_beta)):
            raise StatsError("IRLS produced non-finite coefficients")
        if np.max(np.abs(new_beta - beta)) < tol:
            return new_beta, mu
        beta = new_beta
    raise StatsError(f"IRLS did not converge within {max_iter} iterations (last beta={beta})")


def nb_regression(counts, minute_idx, cluster_ids, level: float = 0.95,
                  fixed_dispersion: float | None = None) -> NBRegressionResult:
    """Per-minute trend in counts: log E[y] = b0 + b1 * minute.

    Two-stage fit: Poisson IRLS, method-of-moments dispersion from Pearson
    residuals, one NB refit. Standard errors are sandwich estimates
    clustered on `cluster_ids` (CR1 small-sample factor G/(G-1)).
    """
    y = np.asarray(counts, dtype=float).ravel()
    minutes = np.asarray(minute_idx, dtype=float).ravel()
    clusters = np.asarray(cluster_ids).ravel()
    if y.size != minutes.size or y.size != clusters.size:
        raise StatsError("counts, minute_idx, cluster_ids must have equal length")
    if np.any(y < 0):
        raise StatsError("counts must be nonnegative")
    unique_clusters = np.unique(clusters)
    if unique_clusters.size < 2:
        raise StatsError("need at least two clusters for cluster-robust errors")
    x = np.column_stack([np.ones_like(minutes), minutes])

    beta, mu = _irls(x, y, alpha=0.0)
    if fixed_dispersion is None:
        n, p = y.size, x.shape[1]
        alpha_hat = float(np.sum(((y - mu) ** 2 - mu) / mu ** 2) / max(n - p, 1))
        alpha_hat = max(alpha_hat, 0.0)
    else:
        if fixed_dispersion <= 0:
            raise StatsError("fixed_dispersion (theta) must be positive")
        alpha_hat = 1.0 / fixed_dispersion
    if alpha_hat > 1e-12:
        beta, mu = _irls(x, y, alpha=alpha_hat)

    w = mu / (1.0 + alpha_hat * mu)
    bread = np.linalg.inv((x.T * w) @ x)
    scores = x * ((y - mu) / (1.0 + alpha_hat * mu))[:, None]
    meat = np.zeros((x.shape[1], x.shape[1]))
    for c in unique_clusters:
        s = scores[clusters == c].sum(axis=0)
        meat += np.outer(s, s)
    g = unique_clusters.size
    meat *= g / (g - 1)
    cov = bread @ meat @ bread
    se = math.sqrt(max(cov[1, 1], 0.0))
    z_crit = _norm_ppf(0.5 + level / 2.0)
    b1 = float(beta[1])
    z_stat = b1 / se if se > 0 else math.inf
    return NBRegressionResult(
        rate_ratio=math.exp(b1),
        ci_low=math.exp(b1 - z_crit * se),
        ci_high=math.exp(b1 + z_crit * se),
        p_value=_norm_sf2(z_stat) if math.isfinite(z_stat) else 0.0,
        dispersion=(1.0 / alpha_hat if alpha_hat > 1e-12 else math.inf),
        n_clusters=int(g),
        coef=np.asarray(beta),
        se=se,
    )


# ---------------------------------------------------------------------------
# Between/within variance ratio


@dataclass(frozen=True)
class VarianceRatioResult:
    ratio: float
    ci_low: float
    ci_high: float
    p_value: float
    degenerate: bool
    policy_means: dict[str, np.ndarray]


def _ratio_from_means(means_by_group: list[np.ndarray]) -> tuple[float, bool]:
    group_means = np.array([m.mean() for m in means_by_group])
    between = group_means.var(ddof=1)
    within = float(np.mean([m.var(ddof=1) for m in means_by_group]))
    if within <= 0.0:
        return (0.0 if between <= 0.0 else math.inf), True
    return float(between / within), False


def variance_ratio(episode_scores: dict[str, Sequence[np.ndarray]],
                   rng: RngStream | None = None, n_boot: int = 2000,
                   n_perm: int = 5000, level: float = 0.95) -> VarianceRatioResult:
    """Between-group variance of group means over mean within-group variance.

    `episode_scores` maps a group label (behavior model) to per-policy
    arrays of episode-level scores. The bootstrap resamples episodes within
    each policy; the permutation shuffles per-policy means across group
    labels preserving group sizes.
    """
    if rng is None:
        rng = RngStream(0)
    if len(episode_scores) < 2:
        raise StatsError("variance_ratio needs at least two groups")
    labels = list(episode_scores.keys())
    episodes: list[list[np.ndarray]] = []
    for label in labels:
        per_policy = [_as_sample(p, f"{label} policy") for p in episode_scores[label]]
        if len(per_policy) < 2:
            raise StatsError(f"group {label!r} needs at least two policies")
        episodes.append(per_policy)

    means = [np.array([p.mean() for p in group]) for group in episodes]
    ratio, degenerate = _ratio_from_means(means)

    boot_rng = rng.child(1)
    reps = np.empty(n_boot)
    for b in range(n_boot):
        bm = []
        for group in episodes:
            bm.append(np.array([p[boot_rng.integers(0, p.size, size=p.size)].mean() for p in group]))
        reps[b], _ = _ratio_from_means(bm)
    finite = reps[np.isfinite(reps)]
    if finite.size == 0:
        ci_low = ci_high = math.nan
    else:
        alpha = (1.0 - level) / 2.0
        ci_low, ci_high = (float(q) for q in np.quantile(finite, [alpha, 1.0 - alpha]))

    perm_rng = rng.child(2)
    all_means = np.concatenate(means)
    sizes = [m.size for m in means]
    exceed = 0
    for _ in range(n_perm):
        shuffled = all_means[perm_rng.permutation(all_means.size)]
        groups, start = [], 0
        for s in sizes:
            groups.append(shuffled[start:start + s])
            start += s
        r_perm, _ = _ratio_from_means(groups)
        if r_perm >= ratio - 1e-12:
            exceed += 1
    p = (1 + exceed) / (n_perm + 1)
    return VarianceRatioResult(
        ratio=ratio, ci_low=ci_low, ci_high=ci_high, p_value=p, degenerate=degenerate,
        policy_means={label: m for label, m in zip(labels, means)},
    )


@dataclass(frozen=True)
class GapEstimate:
    """Point estimate + uncertainty for one distributional comparison."""

    w_obs: float
    ci_low: float
    ci_high: float
    p_value: float | None = None
    cliffs: float | None = None
    cliffs_label: str | None = None
    n_x: int = 0
    n_y: int = 0


def gap_estimate(x, y, rng: RngStream | None = None, n_boot: int = 5000,
                 n_perm: int = 100_000, level: float = 0.95) -> GapEstimate:
    """W1 with percentile-bootstrap CI, permutation p, and Cliff's delta."""
    if rng is None:
        rng = RngStream(0)
    xs = _as_sample(x, "x")
    ys = _as_sample(y, "y")
    w = wasserstein1(xs, ys)
    boot = bootstrap_ci(xs, ys, n_boot=n_boot, level=level, rng=rng.child(1))
    p = permutation_test(xs, ys, n_perm=n_perm, rng=rng.child(2))
    delta, label = cliffs_delta(xs, ys)
    return GapEstimate(w_obs=w, ci_low=boot.low, ci_high=boot.high, p_value=p,
                       cliffs=delta, cliffs_label=label, n_x=xs.size, n_y=ys.size)
