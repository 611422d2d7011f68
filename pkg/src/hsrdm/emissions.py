"""State-conditioned autoregressive emission families.

Two families are provided: a Gaussian vector autoregression for
real-valued observations and a Von Mises autoregression for angles.
Each supports log-density evaluation, sampling, conditional means, an
initial-observation model, and weighted maximum-likelihood fitting.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ive

from .errors import DegenerateCovariance, EmptyWeightSet, UnidentifiableRegression

LOG_2PI = math.log(2.0 * math.pi)

# relative jitter applied after every covariance update; clusters found by
# k-means can be degenerate early in training
COV_JITTER_REL = 1e-8
COV_JITTER_ABS = 1e-12

GAUSSIAN_VAR = "gaussian_var"
VON_MISES_AR = "von_mises_ar"


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class GaussianVarParams:
    """One state's Gaussian VAR dynamics: x_t ~ N(A x_{t-1} + b, Q)."""

    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)

    @property
    def dim(self):
        return self.b.shape[0]


@dataclass
class VonMisesArParams:
    """One state's Von Mises autoregression on the circle.

    Next angle ~ VonMises(a * prev + drift, concentration).
    """

    a: float
    drift: float
    concentration: float

    def __post_init__(self):
        if self.concentration <= 0:
            raise ValueError("concentration must be > 0")


@dataclass
class GaussianInitParams:
    """Initial-observation model for the Gaussian family."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)


@dataclass
class VonMisesInitParams:
    """Initial-observation model for the circular family."""

    mean: float
    concentration: float

    def __post_init__(self):
        if self.concentration <= 0:
            raise ValueError("concentration must be > 0")


def wrap_angle(x):
    """Wrap to [-pi, pi)."""
    return np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi


def _chol(Q):
    try:
        return cho_factor(Q, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance(str(exc)) from exc
    except ValueError as exc:
        raise DegenerateCovariance(str(exc)) from exc


def _log_vonmises_norm(concentration):
    # log(2 pi I0(kappa)) evaluated stably via the scaled Bessel function
    return LOG_2PI + np.log(ive(0, concentration)) + concentration


# ---------------------------------------------------------------------------
# per-observation operations


def emission_log_density(params, x_prev, x_curr):
    """Log density of ``x_curr`` given ``x_prev`` under one state's dynamics."""
    if isinstance(params, GaussianVarParams):
        mean = params.A @ np.asarray(x_prev, dtype=np.float64) + params.b
        return gaussian_log_density(np.asarray(x_curr, dtype=np.float64), mean, params.Q)
    if isinstance(params, VonMisesArParams):
        mean = params.a * float(np.squeeze(x_prev)) + params.drift
        delta = float(np.squeeze(x_curr)) - mean
        return float(params.concentration * np.cos(delta) - _log_vonmises_norm(params.concentration))
    raise TypeError(f"unknown emission params {type(params)!r}")


def emission_conditional_mean(params, x_prev):
    if isinstance(params, GaussianVarParams):
        return params.A @ np.asarray(x_prev, dtype=np.float64) + params.b
    if isinstance(params, VonMisesArParams):
        return wrap_angle(params.a * np.asarray(x_prev, dtype=np.float64) + params.drift)
    raise TypeError(f"unknown emission params {type(params)!r}")


def emission_sample(params, x_prev, rng):
    if isinstance(params, GaussianVarParams):
        mean = params.A @ np.asarray(x_prev, dtype=np.float64) + params.b
        c, lower = _chol(params.Q)
        L = np.tril(c) if lower else np.triu(c).T
        return mean + L @ rng.standard_normal(params.dim)
    if isinstance(params, VonMisesArParams):
        mean = params.a * float(np.squeeze(x_prev)) + params.drift
        draw = rng.vonmises(wrap_angle(mean), params.concentration)
        return np.atleast_1d(wrap_angle(draw))
    raise TypeError(f"unknown emission params {type(params)!r}")


def initial_log_density(init_params, x):
    if isinstance(init_params, GaussianInitParams):
        return gaussian_log_density(np.asarray(x, dtype=np.float64), init_params.mean, init_params.cov)
    if isinstance(init_params, VonMisesInitParams):
        delta = float(np.squeeze(x)) - init_params.mean
        return float(init_params.concentration * np.cos(delta) - _log_vonmises_norm(init_params.concentration))
    raise TypeError(f"unknown initial params {type(init_params)!r}")


def initial_sample(init_params, rng):
    if isinstance(init_params, GaussianInitParams):
        c, lower = _chol(init_params.cov)
        L = np.tril(c) if lower else np.triu(c).T
        return init_params.mean + L @ rng.standard_normal(init_params.mean.shape[0])
    if isinstance(init_params, VonMisesInitParams):
        return np.atleast_1d(wrap_angle(rng.vonmises(init_params.mean, init_params.concentration)))
    raise TypeError(f"unknown initial params {type(init_params)!r}")


def gaussian_log_density(x, mean, cov):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    c = _chol(cov)
    logdet = 2.0 * np.log(np.diag(c[0])).sum()
    r = x - mean
    sol = cho_solve(c, r.T).T
    quad = (r * sol).sum(axis=1)
    out = -0.5 * (d * LOG_2PI + logdet + quad)
    return float(out[0]) if out.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# vectorized series densities (used to build chain evidence)


def gaussian_var_series_log_density(params, x_prev, x_curr):
    """[T] log densities for a whole series under one state's dynamics."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    x_curr = np.asarray(x_curr, dtype=np.float64)
    mean = x_prev @ params.A.T + params.b
    return _gaussian_rows(x_curr - mean, params.Q)


def _gaussian_rows(residuals, cov):
    d = residuals.shape[1]
    c = _chol(cov)
    logdet = 2.0 * np.log(np.diag(c[0])).sum()
    sol = cho_solve(c, residuals.T).T
    quad = (residuals * sol).sum(axis=1)
    return -0.5 * (d * LOG_2PI + logdet + quad)


def von_mises_ar_series_log_density(params, x_prev, x_curr):
    x_prev = np.asarray(x_prev, dtype=np.float64).reshape(-1)
    x_curr = np.asarray(x_curr, dtype=np.float64).reshape(-1)
    delta = x_curr - (params.a * x_prev + params.drift)
    return params.concentration * np.cos(delta) - _log_vonmises_norm(params.concentration)


def series_log_density(params, x_prev, x_curr):
    if isinstance(params, GaussianVarParams):
        return gaussian_var_series_log_density(params, x_prev, x_curr)
    if isinstance(params, VonMisesArParams):
        return von_mises_ar_series_log_density(params, x_prev, x_curr)
    raise TypeError(f"unknown emission params {type(params)!r}")


def initial_series_log_density(init_params, x):
    if isinstance(init_params, GaussianInitParams):
        return _gaussian_rows(np.atleast_2d(x) - init_params.mean, init_params.cov)
    if isinstance(init_params, VonMisesInitParams):
        delta = np.asarray(x, dtype=np.float64).reshape(-1) - init_params.mean
        return init_params.concentration * np.cos(delta) - _log_vonmises_norm(init_params.concentration)
    raise TypeError(f"unknown initial params {type(init_params)!r}")


# ---------------------------------------------------------------------------
# weighted maximum likelihood


def regularize_covariance(Q):
    """Add relative jitter so downstream Cholesky factorizations succeed."""
    d = Q.shape[0]
    jitter = COV_JITTER_REL * np.trace(Q) / d + COV_JITTER_ABS
    return Q + jitter * np.eye(d)


def fit_gaussian_var_weighted(x_prev_rows, x_curr_rows, weights):
    """Weighted least squares for (A, b) plus weighted residual covariance.

    Maximizes the weighted Gaussian VAR log-likelihood; the covariance
    uses the MLE denominator (sum of weights).  Raises
    UnidentifiableRegression when the weighted design is singular.
    """
    X = np.asarray(x_prev_rows, dtype=np.float64)
    Y = np.asarray(x_curr_rows, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    wsum = w.sum()
    if wsum <= 0:
        raise EmptyWeightSet("all weights are zero")
    n, d = X.shape
    Z = np.concatenate([X, np.ones((n, 1))], axis=1)
    Zw = Z * w[:, None]
    G = Z.T @ Zw
    # guard the normal equations: near-singular designs are unidentifiable
    if np.linalg.matrix_rank(G, tol=1e-10 * max(1.0, np.abs(G).max())) < d + 1:
        raise UnidentifiableRegression("weighted design matrix is singular")
    B = np.linalg.solve(G, Z.T @ (Y * w[:, None]))
    A = B[:d].T
    b = B[d]
    R = Y - Z @ B
    Q = (R * w[:, None]).T @ R / wsum
    Q = 0.5 * (Q + Q.T)
    return GaussianVarParams(A=A, b=b, Q=regularize_covariance(Q))


def fit_gaussian_init_weighted(x_rows, weights):
    """Weighted mean/covariance for the initial-observation model."""
    X = np.asarray(x_rows, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise EmptyWeightSet("all weights are zero")
    mean = (X * w[:, None]).sum(axis=0) / wsum
    R = X - mean
    cov = (R * w[:, None]).T @ R / wsum
    cov = 0.5 * (cov + cov.T)
    return GaussianInitParams(mean=mean, cov=regularize_covariance(cov))


def kappa_from_resultant(rbar):
    """Best-Fisher inverse of the Bessel ratio I1/I0."""
    rbar = min(max(float(rbar), 0.0), 1.0 - 1e-12)
    if rbar < 0.53:
        kappa = 2.0 * rbar + rbar**3 + 5.0 * rbar**5 / 6.0
    elif rbar < 0.85:
        kappa = -0.4 + 1.39 * rbar + 0.43 / (1.0 - rbar)
    else:
        kappa = 1.0 / (rbar**3 - 4.0 * rbar**2 + 3.0 * rbar)
    return max(kappa, 1e-8)


def _golden_section(f, lo, hi, tol=1e-8, max_iter=200):
    # maximize a unimodal scalar function on [lo, hi]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_von_mises_ar_weighted(x_prev, x_curr, weights, a_range=(-2.0, 2.0), grid_step=0.01):
    """Weighted MLE for the Von Mises autoregression.

    The AR coefficient is found by maximizing the weighted resultant
    length over a grid refined by golden-section search; the drift is
    then closed-form, and the concentration comes from the Best-Fisher
    inverse Bessel-ratio approximation.
    """
    xp = np.asarray(x_prev, dtype=np.float64).reshape(-1)
    xc = np.asarray(x_curr, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    wsum = w.sum()
    if wsum <= 0:
        raise EmptyWeightSet("all weights are zero")

    def resultant(a):
        delta = xc - a * xp
        return math.hypot(float(np.dot(w, np.cos(delta))), float(np.dot(w, np.sin(delta))))

    grid = np.arange(a_range[0], a_range[1] + grid_step / 2, grid_step)
    values = [resultant(a) for a in grid]
    i = int(np.argmax(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    a = _golden_section(resultant, lo, hi)
    delta = xc - a * xp
    sin_sum = float(np.dot(w, np.sin(delta)))
    cos_sum = float(np.dot(w, np.cos(delta)))
    drift = math.atan2(sin_sum, cos_sum)
    rbar = math.hypot(sin_sum, cos_sum) / wsum
    return VonMisesArParams(a=float(a), drift=drift, concentration=kappa_from_resultant(rbar))


def fit_von_mises_init_weighted(x_rows, weights):
    x = np.asarray(x_rows, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    wsum = w.sum()
    if wsum <= 0:
        raise EmptyWeightSet("all weights are zero")
    sin_sum = float(np.dot(w, np.sin(x)))
    cos_sum = float(np.dot(w, np.cos(x)))
    mean = math.atan2(sin_sum, cos_sum)
    rbar = math.hypot(sin_sum, cos_sum) / wsum
    return VonMisesInitParams(mean=mean, concentration=kappa_from_resultant(rbar))


def weighted_log_likelihood(params, x_prev, x_curr, weights):
    """Weighted emission log-likelihood; used to audit M-step monotonicity."""
    return float(np.dot(np.asarray(weights, dtype=np.float64), series_log_density(params, x_prev, x_curr)))
