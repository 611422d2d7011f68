"""Simplex and log-space primitives shared across the package.

Probability vectors live in linear space, transition structure in log
space; every normalization goes through the log-sum-exp trick so that
long chains never underflow.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import BoundarySimplexPoint, NonFiniteUtility

PROB_ATOL = 1e-9


def log_softmax(utilities):
    """Log of the softmax of a utility vector (last axis).

    Invariant to adding a constant to all utilities; the result
    exponentiates to a probability vector.
    """
    u = np.asarray(utilities, dtype=np.float64)
    if u.shape[-1] < 1:
        raise NonFiniteUtility("empty utility vector")
    if not np.all(np.isfinite(u)):
        raise NonFiniteUtility("utilities must be finite")
    shifted = u - u.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_normalize(log_weights, axis=-1):
    """Normalize log weights (which may contain -inf) into log probabilities."""
    lw = np.asarray(log_weights, dtype=np.float64)
    return lw - logsumexp(lw, axis=axis, keepdims=True)


def is_prob_vector(values, atol=PROB_ATOL):
    v = np.asarray(values, dtype=np.float64)
    return bool(np.all(v >= -atol) and abs(v.sum() - 1.0) <= atol)


def validate_prob_vector(values, name="probability vector", atol=PROB_ATOL):
    v = np.asarray(values, dtype=np.float64)
    if not is_prob_vector(v, atol):
        raise ValueError(f"{name} is not a probability vector: sum={v.sum()!r}")
    return v


def validate_log_tpm(log_values, name="log TPM", atol=PROB_ATOL):
    """Check that every row of a log transition matrix exponentiates to a
    probability vector."""
    lv = np.asarray(log_values, dtype=np.float64)
    rows = np.exp(lv)
    sums = rows.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= atol):
        raise ValueError(f"{name} rows do not normalize: sums={sums!r}")
    return lv


@dataclass(frozen=True)
class StickyDirichletPrior:
    """Dirichlet prior on transition rows with a self-transition bonus.

    The concentration is ``alpha`` everywhere except the self-transition
    entry, which gets ``alpha + kappa``.  Large ``kappa`` concentrates
    mass on persistent (sticky) segmentations.
    """

    alpha: float
    kappa: float
    n: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def concentration(self, self_index):
        c = np.full(self.n, self.alpha, dtype=np.float64)
        c[self_index] += self.kappa
        return c

    def log_density(self, row, self_index):
        return sticky_dirichlet_log_density(self, row, self_index)

    def sample_row(self, self_index, rng):
        # normalized independent Gamma draws
        g = rng.standard_gamma(self.concentration(self_index))
        return g / g.sum()

    def sample_tpm(self, rng):
        return np.stack([self.sample_row(i, rng) for i in range(self.n)])

    def log_density_tpm(self, tpm):
        return sum(self.log_density(tpm[i], i) for i in range(self.n))


def dirichlet_log_density(row, concentration):
    """Log Dirichlet density (normalizing constant included) at an
    interior simplex point."""
    row = np.asarray(row, dtype=np.float64)
    c = np.asarray(concentration, dtype=np.float64)
    if np.any(row <= 0.0):
        raise BoundarySimplexPoint("density requires an interior simplex point")
    log_norm = gammaln(c.sum()) - gammaln(c).sum()
    return float(log_norm + ((c - 1.0) * np.log(row)).sum())


def sticky_dirichlet_log_density(prior, row, self_index):
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (prior.n,):
        raise ValueError(f"row has dimension {row.shape}, expected ({prior.n},)")
    if not 0 <= self_index < prior.n:
        raise ValueError("self_index out of range")
    return dirichlet_log_density(row, prior.concentration(self_index))
