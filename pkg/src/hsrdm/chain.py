"""Exact dynamic programming for a single discrete chain.

The chain is described by time-varying log potentials (transitions may
already fold in recurrence, so every timestep has its own matrix) and
supports filtering, smoothing with pairwise marginals, entropy, Viterbi
decoding, and ancestral sampling.  This is the computational kernel
behind both the system-level and entity-level posterior updates.

Transition rows of generative chains are normalized distributions, but
the recursions are valid for unnormalized potentials as well (the
surrogate chains built during inference are of that kind); in that case
the log normalizer is the log partition function of the chain.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ImpossibleEvidence
from .simplex import validate_log_tpm, validate_prob_vector


@dataclass
class ChainSpec:
    """Log potentials of one chain.

    log_init:  [n]          initial log weights
    log_trans: [T-1, n, n]  per-timestep log transition potentials
                            (row = from-state)
    log_emit:  [T, n]       per-timestep log evidence
    """

    log_init: np.ndarray
    log_trans: np.ndarray
    log_emit: np.ndarray

    def __post_init__(self):
        self.log_init = np.ascontiguousarray(self.log_init, dtype=np.float64)
        self.log_emit = np.ascontiguousarray(self.log_emit, dtype=np.float64)
        self.log_trans = np.ascontiguousarray(self.log_trans, dtype=np.float64)
        T, n = self.log_emit.shape
        if self.log_init.shape != (n,):
            raise ValueError("log_init dimension mismatch")
        if self.log_trans.shape != (max(T - 1, 0), n, n):
            raise ValueError("log_trans shape mismatch")

    @property
    def n_timesteps(self):
        return self.log_emit.shape[0]

    @property
    def n_states(self):
        return self.log_emit.shape[1]

    def validate_normalized(self, atol=1e-9):
        """Check the generative-chain invariants (rows are distributions)."""
        validate_prob_vector(np.exp(self.log_init), "chain init", atol)
        if self.n_timesteps > 1:
            validate_log_tpm(self.log_trans, "chain transitions", atol)
        return self


@dataclass
class ChainPosterior:
    """Unary and adjacent-pairwise marginals of one chain.

    unary:    [T, n]
    pairwise: [T-1, n, n], slab t holds q(state_t, state_{t+1})
    log_normalizer: log marginal likelihood / partition function
    zero_division_events: count of guarded 0/0 ratios in the smoother
    """

    unary: np.ndarray
    pairwise: np.ndarray
    log_normalizer: float
    zero_division_events: int = 0
    filtered: np.ndarray = field(default=None, repr=False)
    predicted: np.ndarray = field(default=None, repr=False)

    @property
    def n_timesteps(self):
        return self.unary.shape[0]

    @property
    def n_states(self):
        return self.unary.shape[1]


def _linear_trans(log_trans):
    """Linear-space potentials plus the per-timestep scalar shifts that
    keep exp() in range for unnormalized inputs."""
    if log_trans.shape[0] == 0:
        return np.zeros_like(log_trans), np.zeros(0)
    shift = log_trans.max(axis=(1, 2))
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(under="ignore"):
        trans = np.exp(log_trans - shift[:, None, None])
    return np.ascontiguousarray(trans), shift


def _init_probs(log_init):
    m = log_init.max()
    if not np.isfinite(m):
        raise ImpossibleEvidence("initial distribution has no support")
    with np.errstate(under="ignore"):
        p = np.exp(log_init - m)
    return np.ascontiguousarray(p / p.sum()), m + np.log(p.sum())


def filter(spec):
    """Forward (filtering) recursion.

    Returns (filtered [T,n], predicted [T,n], log_normalizer), all in
    linear space with per-step normalization.
    """
    trans, shift = _linear_trans(spec.log_trans)
    init, init_shift = _init_probs(spec.log_init)
    filt, pred, log_norm, dead = _kernels.filter_pass(init, trans, spec.log_emit)
    if dead >= 0:
        raise ImpossibleEvidence(f"posterior mass vanished at timestep {dead}")
    return filt, pred, float(log_norm + shift.sum() + init_shift)


def smooth(spec):
    """Full forward-backward pass returning a ChainPosterior."""
    trans, shift = _linear_trans(spec.log_trans)
    init, init_shift = _init_probs(spec.log_init)
    filt, pred, log_norm, dead = _kernels.filter_pass(init, trans, spec.log_emit)
    if dead >= 0:
        raise ImpossibleEvidence(f"posterior mass vanished at timestep {dead}")
    smoothed, pairwise, zero_divs = _kernels.smooth_pass(filt, pred, trans)
    return ChainPosterior(
        unary=smoothed,
        pairwise=pairwise,
        log_normalizer=float(log_norm + shift.sum() + init_shift),
        zero_division_events=int(zero_divs),
        filtered=filt,
        predicted=pred,
    )


def chain_entropy(post):
    """Entropy of the chain posterior from its unary/pairwise marginals.

    H = H[q(state_0)] + sum_t H[q(state_{t+1}) | q(state_t)], with the
    convention 0 log 0 = 0; always >= 0.
    """
    u0 = post.unary[0]
    h = -_xlogx(u0).sum()
    if post.pairwise.shape[0] > 0:
        pair = post.pairwise
        cond = post.unary[:-1, :, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            logratio = np.where(pair > 0.0, np.log(pair) - np.log(np.maximum(cond, 1e-300)), 0.0)
        h -= float((pair * logratio).sum())
    return max(float(h), 0.0)


def _xlogx(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0.0, p * np.log(p), 0.0)


def viterbi(spec):
    """Most likely state path; ties break toward the lower state index."""
    return _kernels.viterbi_path(spec.log_init, spec.log_trans, spec.log_emit)


def sample_chain(spec, rng):
    """Ancestral sample from a normalized chain (ignores log_emit)."""
    T = spec.n_timesteps
    path = np.empty(T, dtype=np.int64)
    probs, _ = _init_probs(spec.log_init)
    path[0] = _draw(probs, rng)
    with np.errstate(under="ignore"):
        trans = np.exp(spec.log_trans)
    for t in range(1, T):
        row = trans[t - 1, path[t - 1]]
        path[t] = _draw(row / row.sum(), rng)
    return path


def _draw(probs, rng):
    c = np.cumsum(probs)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right").clip(0, len(probs) - 1))


def posterior_from_labels(labels, n_states):
    """Degenerate (one-hot) ChainPosterior for a hard label sequence."""
    labels = np.asarray(labels, dtype=np.int64)
    T = labels.shape[0]
    unary = np.zeros((T, n_states))
    unary[np.arange(T), labels] = 1.0
    pairwise = np.zeros((max(T - 1, 0), n_states, n_states))
    if T > 1:
        pairwise[np.arange(T - 1), labels[:-1], labels[1:]] = 1.0
    return ChainPosterior(unary=unary, pairwise=pairwise, log_normalizer=0.0)
