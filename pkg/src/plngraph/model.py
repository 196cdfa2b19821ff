"""Poisson log-normal latent Gaussian model: sampling, marginal moments and
diagonal initial estimates.

The observed vector ``Y`` has conditionally independent Poisson coordinates
with rates ``exp(Z_i)``, where ``Z ~ N(beta, Sigma)``.  The conditional
dependence structure of interest is the support of ``Omega = Sigma^{-1}``.
Everything here is pure given its inputs plus a seed, so concurrent use on
shared read-only data is safe.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidInputError, NumericalFailureError, UninformativeVariableError

#: Floor applied to a latent variance when a column is not overdispersed.
SIGMA_FLOOR = 1e-4

#: Shrinkage weight used when no per-variable estimate is supplied.
DEFAULT_SHRINKAGE = 0.5

INIT_ORIGINS = ("moment", "mirna_shrunk", "external")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class CountMatrix:
    """An ``n x p`` matrix of non-negative integer read counts.

    Rows are samples, columns are variables.  Variable names must be unique.
    """

    values: np.ndarray
    variable_names: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise InvalidInputError("count matrix must be two-dimensional")
        if not np.issubdtype(vals.dtype, np.integer):
            if not np.all(np.isfinite(vals)) or np.any(vals != np.floor(vals)):
                raise InvalidInputError("count matrix entries must be integers")
            vals = vals.astype(np.int64)
        if np.any(vals < 0):
            raise InvalidInputError("count matrix entries must be non-negative")
        n, p = vals.shape
        if n < 1 or p < 1:
            raise InvalidInputError("count matrix must have at least one row and column")
        self.variable_names = tuple(str(v) for v in self.variable_names)
        self.sample_ids = tuple(str(s) for s in self.sample_ids)
        if len(self.variable_names) != p:
            raise InvalidInputError("variable_names length does not match column count")
        if len(self.sample_ids) != n:
            raise InvalidInputError("sample_ids length does not match row count")
        if len(set(self.variable_names)) != p:
            raise InvalidInputError("variable names must be unique")
        self.values = vals

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass
class PlnParams:
    """Latent Gaussian mean ``beta`` and precision ``Omega = Sigma^{-1}``."""

    beta: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        omega = np.asarray(self.precision, dtype=float)
        if beta.ndim != 1:
            raise InvalidInputError("beta must be a vector")
        p = beta.shape[0]
        if omega.shape != (p, p):
            raise InvalidInputError("precision must be p x p with p = len(beta)")
        if np.max(np.abs(omega - omega.T), initial=0.0) > 1e-10:
            raise InvalidInputError("precision matrix is not symmetric within 1e-10")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError as exc:
            raise InvalidInputError("precision matrix is not positive-definite") from exc
        self.beta = beta
        self.precision = omega

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)


@dataclass
class InitialEstimate:
    """Diagonal starting point: per-variable latent mean and variance.

    ``flags[i]`` marks variables whose variance had to be clamped because the
    observed column was not overdispersed.  The implied starting precision is
    ``diag(1 / sigma0_diag)``.
    """

    beta0: np.ndarray
    sigma0_diag: np.ndarray
    origin: str
    flags: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        beta0 = np.asarray(self.beta0, dtype=float)
        sig = np.asarray(self.sigma0_diag, dtype=float)
        if beta0.ndim != 1 or sig.shape != beta0.shape:
            raise InvalidInputError("beta0 and sigma0_diag must be vectors of equal length")
        if np.any(~np.isfinite(beta0)) or np.any(~np.isfinite(sig)):
            raise InvalidInputError("initial estimate contains non-finite entries")
        if np.any(sig <= 0):
            raise InvalidInputError("sigma0_diag entries must be strictly positive")
        if self.origin not in INIT_ORIGINS:
            raise InvalidInputError(f"origin must be one of {INIT_ORIGINS}")
        if self.flags is None:
            flags = np.zeros(beta0.shape[0], dtype=bool)
        else:
            flags = np.asarray(self.flags, dtype=bool)
            if flags.shape != beta0.shape:
                raise InvalidInputError("flags must align with beta0")
        self.beta0 = beta0
        self.sigma0_diag = sig
        self.flags = flags

    @property
    def p(self) -> int:
        return self.beta0.shape[0]

    def omega0(self) -> np.ndarray:
        """Diagonal starting precision implied by the variances."""
        return np.diag(1.0 / self.sigma0_diag)

    def to_dict(self) -> dict:
        return {
            "beta0": self.beta0.tolist(),
            "sigma0_diag": self.sigma0_diag.tolist(),
            "origin": self.origin,
            "flags": self.flags.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InitialEstimate":
        return cls(
            beta0=np.asarray(d["beta0"], dtype=float),
            sigma0_diag=np.asarray(d["sigma0_diag"], dtype=float),
            origin=d["origin"],
            flags=np.asarray(d.get("flags", []), dtype=bool) if d.get("flags") is not None else None,
        )


@dataclass
class MeanVarianceTrend:
    """Linear trend of (log mean, log variance) across variables.

    ``pc`` is the unit direction of the first principal component of the
    centered log-points, with its first coordinate forced positive so that
    repeated fits are reproducible.  ``center`` is the mean of the log-points
    and anchors all projections.  ``gamma`` holds per-variable shrinkage
    weights in (0, 1), filled with :data:`DEFAULT_SHRINKAGE` until replaced.
    """

    pc: np.ndarray
    center: np.ndarray
    gamma: np.ndarray
    log_means: np.ndarray
    log_vars: np.ndarray

    def __post_init__(self):
        pc = np.asarray(self.pc, dtype=float)
        center = np.asarray(self.center, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        if pc.shape != (2,) or center.shape != (2,):
            raise InvalidInputError("pc and center must be 2-vectors")
        if abs(np.linalg.norm(pc) - 1.0) > 1e-12:
            raise InvalidInputError("pc must have unit norm within 1e-12")
        if np.any(gamma <= 0.0) or np.any(gamma >= 1.0):
            raise InvalidInputError("gamma weights must lie strictly inside (0, 1)")
        lm = np.asarray(self.log_means, dtype=float)
        lv = np.asarray(self.log_vars, dtype=float)
        if lm.shape != gamma.shape or lv.shape != gamma.shape:
            raise InvalidInputError("log_means, log_vars and gamma must align")
        self.pc = pc
        self.center = center
        self.gamma = gamma
        self.log_means = lm
        self.log_vars = lv

    @property
    def p(self) -> int:
        return self.gamma.shape[0]

    def project(self, points: np.ndarray) -> np.ndarray:
        """Orthogonal projection of log-points onto the fitted trend line."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts - self.center
        coef = rel @ self.pc
        return coef[:, None] * self.pc + self.center

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed perpendicular distance of log-points from the trend line."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        perp = np.array([-self.pc[1], self.pc[0]])
        return (pts - self.center) @ perp


@dataclass
class GammaEstimate:
    """Per-variable shrinkage weights with bootstrap diagnostics."""

    gamma: np.ndarray
    flagged: np.ndarray
    sigma_d2: np.ndarray
    sigma_r2: float
    distances: np.ndarray


# ---------------------------------------------------------------------------
# sampling and moments
# ---------------------------------------------------------------------------


def sample_pln(params: PlnParams, n: int, seed: int) -> CountMatrix:
    """Draw ``n`` iid observations from the Poisson log-normal model.

    Each row samples ``Z ~ N(beta, Omega^{-1})`` and then independent
    ``Y_i | Z ~ Poisson(exp(Z_i))``.  Identical ``(params, n, seed)`` give a
    byte-identical result.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    rng = np.random.default_rng(seed)
    p = params.p
    chol = np.linalg.cholesky(params.precision)
    eps = rng.standard_normal((n, p))
    # Z = beta + L^{-T} eps has covariance (L L^T)^{-1} = Omega^{-1}
    latent = params.beta + solve_triangular(chol, eps.T, trans="T", lower=True).T
    rates = np.exp(latent)
    if not np.all(np.isfinite(rates)):
        raise NumericalFailureError(
            "latent rates overflow; beta or latent variances are too large",
            {"max_latent": float(np.max(latent))},
        )
    counts = rng.poisson(rates)
    names = tuple(f"v{i + 1}" for i in range(p))
    ids = tuple(f"s{j + 1}" for j in range(n))
    return CountMatrix(values=counts.astype(np.int64), variable_names=names, sample_ids=ids)


def pln_marginal_moments(beta_i: float, sigma_ii: float) -> tuple[float, float]:
    """Analytic first two raw moments of one observed coordinate.

    Returns ``(E[Y], E[Y^2])`` where ``E[Y] = exp(beta + sigma/2)`` and
    ``E[Y^2] = E[Y] + exp(2 beta + 2 sigma)``.  Overflow saturates to
    ``inf`` with a warning rather than raising.
    """
    if sigma_ii <= 0:
        raise InvalidInputError("sigma_ii must be strictly positive")
    with np.errstate(over="ignore"):
        mean = float(np.exp(beta_i + sigma_ii / 2.0))
        second = float(mean + np.exp(2.0 * beta_i + 2.0 * sigma_ii))
    if not np.isfinite(second):
        warnings.warn(
            f"marginal moments overflow at beta={beta_i}, sigma={sigma_ii}",
            RuntimeWarning,
            stacklevel=2,
        )
    return mean, second


def invert_marginal_moments(m1: float, m2: float) -> tuple[float, float]:
    """Solve the marginal moment equations for ``(beta, sigma)``.

    Requires overdispersion, i.e. ``m2 - m1 > m1**2`` (variance exceeding the
    mean).  Inverse of :func:`pln_marginal_moments`.
    """
    if m1 <= 0:
        raise InvalidInputError("first moment must be positive")
    excess = m2 - m1
    if excess <= m1 * m1:
        raise InvalidInputError("moments are not overdispersed (variance <= mean)")
    sigma = float(np.log(excess / (m1 * m1)))
    beta = float(np.log(m1 * m1 / np.sqrt(excess)))
    return beta, sigma


# ---------------------------------------------------------------------------
# initial estimates
# ---------------------------------------------------------------------------


def _clamped_init(m1: np.ndarray, m2: np.ndarray, names: tuple[str, ...]):
    """Vectorized moment inversion with the underdispersion clamp."""
    p = m1.shape[0]
    beta0 = np.empty(p)
    sigma0 = np.empty(p)
    flags = np.zeros(p, dtype=bool)
    for i in range(p):
        if m1[i] <= 0:
            raise UninformativeVariableError(
                f"variable {names[i]!r} has no positive counts; drop it before fitting"
            )
        excess = m2[i] - m1[i]
        if excess > m1[i] * m1[i]:
            sigma0[i] = np.log(excess / (m1[i] * m1[i]))
            beta0[i] = np.log(m1[i] * m1[i] / np.sqrt(excess))
        else:
            # not overdispersed: keep the observed mean, floor the variance
            sigma0[i] = SIGMA_FLOOR
            beta0[i] = np.log(m1[i]) - SIGMA_FLOOR / 2.0
            flags[i] = True
    return beta0, sigma0, flags


def moment_init(data: CountMatrix) -> InitialEstimate:
    """Method-of-moments starting point from per-variable raw moments.

    Uses ``beta = log(m1^2 / sqrt(m2 - m1))`` and
    ``sigma = log((m2 - m1) / m1^2)`` with ``m1, m2`` the per-variable mean
    and mean square.  Columns that are not overdispersed are clamped to
    :data:`SIGMA_FLOOR` and flagged; all-zero columns raise.
    """
    if data.n < 2:
        raise InvalidInputError("moment initialization needs at least two samples")
    vals = data.values.astype(float)
    m1 = vals.mean(axis=0)
    m2 = (vals * vals).mean(axis=0)
    beta0, sigma0, flags = _clamped_init(m1, m2, data.variable_names)
    return InitialEstimate(beta0=beta0, sigma0_diag=sigma0, origin="moment", flags=flags)


def fit_trend_points(log_means: np.ndarray, log_vars: np.ndarray) -> MeanVarianceTrend:
    """Fit the mean-variance trend directly from log-scale points."""
    lm = np.asarray(log_means, dtype=float)
    lv = np.asarray(log_vars, dtype=float)
    if lm.ndim != 1 or lm.shape != lv.shape or lm.shape[0] < 2:
        raise InvalidInputError("need at least two (log mean, log variance) points")
    pts = np.column_stack([lm, lv])
    center = pts.mean(axis=0)
    centered = pts - center
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    pc = vt[0]
    if pc[0] < 0 or (pc[0] == 0 and pc[1] < 0):
        pc = -pc
    pc = pc / np.linalg.norm(pc)
    gamma = np.full(lm.shape[0], DEFAULT_SHRINKAGE)
    return MeanVarianceTrend(pc=pc, center=center, gamma=gamma, log_means=lm, log_vars=lv)


def _column_stats(data: CountMatrix) -> tuple[np.ndarray, np.ndarray]:
    vals = data.values.astype(float)
    means = vals.mean(axis=0)
    # population variance, so that m2 = var + mean^2 reproduces the raw moments
    variances = vals.var(axis=0)
    return means, variances


def fit_trend(data: CountMatrix) -> MeanVarianceTrend:
    """First principal component of the per-variable (log mean, log variance)
    cloud, centered at its mean, with the sign fixed to a positive first
    coordinate."""
    if data.n < 2:
        raise InvalidInputError("trend fitting needs at least two samples")
    if data.p < 2:
        raise InvalidInputError("trend fitting needs at least two variables")
    means, variances = _column_stats(data)
    for i in range(data.p):
        if means[i] <= 0:
            raise UninformativeVariableError(
                f"variable {data.variable_names[i]!r} has zero mean; filter it upstream"
            )
        if variances[i] <= 0:
            raise UninformativeVariableError(
                f"variable {data.variable_names[i]!r} has zero variance; filter it upstream"
            )
    return fit_trend_points(np.log(means), np.log(variances))


def mirna_shrink_init(
    data: CountMatrix,
    trend: MeanVarianceTrend,
    gamma: float | np.ndarray | None = None,
) -> InitialEstimate:
    """Shrink per-variable (mean, variance) toward the fitted trend, then
    invert the marginal moments.

    Each pair is blended as ``gamma * (m, v) + (1 - gamma) * exp(P)`` with
    ``P`` the projection of the log-point onto the trend line.  ``gamma`` may
    be a scalar, a per-variable vector, or ``None`` to use ``trend.gamma``.
    """
    means, variances = _column_stats(data)
    if trend.p != data.p:
        raise InvalidInputError("trend was fitted on a different number of variables")
    if not np.allclose(trend.log_means, np.log(means), rtol=1e-9, atol=1e-12):
        raise InvalidInputError("trend was fitted on different data")
    if gamma is None:
        g = trend.gamma
    else:
        g = np.broadcast_to(np.asarray(gamma, dtype=float), (data.p,)).copy()
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise InvalidInputError("gamma must lie strictly inside (0, 1)")
    pts = np.column_stack([trend.log_means, trend.log_vars])
    proj = trend.project(pts)
    blended_mean = g * means + (1.0 - g) * np.exp(proj[:, 0])
    blended_var = g * variances + (1.0 - g) * np.exp(proj[:, 1])
    m2 = blended_var + blended_mean * blended_mean
    beta0, sigma0, flags = _clamped_init(blended_mean, m2, data.variable_names)
    return InitialEstimate(beta0=beta0, sigma0_diag=sigma0, origin="mirna_shrunk", flags=flags)


# ---------------------------------------------------------------------------
# empirical-Bayes shrinkage weights
# ---------------------------------------------------------------------------


def shrinkage_gamma(sigma_d2: float | np.ndarray, sigma_r2: float) -> np.ndarray:
    """Posterior-mean shrinkage factor for a normal location with normal prior.

    With measurement variance ``sigma_d2`` and prior variance ``sigma_r2``
    centered on the trend, the posterior mean of the true distance is
    ``gamma * d`` with ``gamma = sigma_r2 / (sigma_r2 + sigma_d2)``.
    """
    sd2 = np.asarray(sigma_d2, dtype=float)
    return sigma_r2 / (sigma_r2 + sd2)


def eb_gamma(
    data: CountMatrix,
    trend: MeanVarianceTrend,
    bootstrap_reps: int,
    seed: int,
) -> GammaEstimate:
    """Estimate per-variable shrinkage weights by bootstrapping the trend
    distances.

    Rows are resampled with replacement; for each replicate the signed
    perpendicular distance of every variable's (log mean, log variance) point
    to the fixed trend line is recomputed.  The bootstrap variance of those
    distances estimates the per-variable measurement noise; the prior spread
    is matched from the median absolute deviation of the observed distances.
    Variables whose resampled columns degenerate (no finite distance) fall
    back to :data:`DEFAULT_SHRINKAGE` and are flagged.
    """
    if bootstrap_reps < 50:
        raise InvalidInputError("bootstrap_reps must be at least 50")
    if trend.p != data.p:
        raise InvalidInputError("trend was fitted on a different number of variables")
    n, p = data.n, data.p
    vals = data.values.astype(float)
    perp = np.array([-trend.pc[1], trend.pc[0]])

    base_pts = np.column_stack([trend.log_means, trend.log_vars])
    d_obs = (base_pts - trend.center) @ perp

    # one row resample per replicate, seeded independently of replicate order
    seeds = np.random.SeedSequence(seed).spawn(bootstrap_reps)
    boot = np.full((bootstrap_reps, p), np.nan)
    for b in range(bootstrap_reps):
        rng = np.random.default_rng(seeds[b])
        rows = rng.integers(0, n, size=n)
        sub = vals[rows]
        m = sub.mean(axis=0)
        v = sub.var(axis=0)
        ok = (m > 0) & (v > 0)
        pts = np.column_stack([np.log(m[ok]), np.log(v[ok])])
        boot[b, ok] = (pts - trend.center) @ perp

    sigma_d2 = np.empty(p)
    flagged = np.zeros(p, dtype=bool)
    for i in range(p):
        col = boot[:, i]
        col = col[np.isfinite(col)]
        if col.size < 2 or np.var(col, ddof=1) <= 0.0:
            sigma_d2[i] = np.nan
            flagged[i] = True
        else:
            sigma_d2[i] = np.var(col, ddof=1)

    # prior spread: MAD of the observed distances scaled to a normal variance,
    # less the typical bootstrap noise, floored to stay usable
    mad = np.median(np.abs(d_obs - np.median(d_obs)))
    total_var = (1.4826 * mad) ** 2
    med_noise = np.nanmedian(sigma_d2) if np.any(np.isfinite(sigma_d2)) else 0.0
    sigma_r2 = max(total_var - med_noise, 1e-6)

    gamma = np.full(p, DEFAULT_SHRINKAGE)
    ok = ~flagged
    gamma[ok] = shrinkage_gamma(sigma_d2[ok], sigma_r2)
    gamma = np.clip(gamma, 1e-12, 1.0 - 1e-12)
    return GammaEstimate(
        gamma=gamma,
        flagged=flagged,
        sigma_d2=sigma_d2,
        sigma_r2=float(sigma_r2),
        distances=d_obs,
    )


def with_gamma(trend: MeanVarianceTrend, gamma: np.ndarray) -> MeanVarianceTrend:
    """Return a copy of the trend carrying the given shrinkage weights."""
    return replace(trend, gamma=np.asarray(gamma, dtype=float))
