"""Categorical GLM transition models for the system and entity chains.

Next-state probabilities are the softmax of additive utilities: a
baseline log transition preference selected by the previous state, plus
recurrent feedback computed from the previous observation through a
pluggable featurization.  Optional exogenous covariates are concatenated
after the recurrence features.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import FeatureDimMismatch, MissingEntityIndex
from .simplex import log_softmax


# ---------------------------------------------------------------------------
# recurrence featurizations


@dataclass
class RecurrenceSpec:
    """Featurization applied to the previous observation.

    kind: one of {"zero", "identity", "rbf", "out_of_bounds_indicators",
    "oob_count", "elapsed_since_predicate", "custom"}; kind-specific
    parameters live in ``params``.  ``covariate_dim`` counts exogenous
    covariate entries appended after the features.
    """

    kind: str
    params: dict = field(default_factory=dict)
    covariate_dim: int = 0

    KINDS = ("zero", "identity", "rbf", "out_of_bounds_indicators",
             "oob_count", "elapsed_since_predicate", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown recurrence kind {self.kind!r}")
        if self.covariate_dim < 0:
            raise ValueError("covariate_dim must be >= 0")

    def feature_dim(self, obs_dim, n_entities=None):
        """Dimension of the feature vector (covariates excluded)."""
        if self.kind == "zero":
            return 0
        if self.kind == "identity":
            return obs_dim if n_entities is None else obs_dim * n_entities
        if self.kind == "rbf":
            return 1
        if self.kind == "out_of_bounds_indicators":
            return 2 * obs_dim
        if self.kind == "oob_count":
            return 1
        if self.kind == "elapsed_since_predicate":
            return 1
        if self.kind == "custom":
            return int(self.params["dim"])
        raise AssertionError

    def output_dim(self, obs_dim, n_entities=None):
        return self.feature_dim(obs_dim, n_entities) + self.covariate_dim

    @property
    def is_entity_level(self):
        # kinds that reduce over entities are system-level only
        return self.kind in ("zero", "identity", "rbf", "out_of_bounds_indicators", "custom")

    def supports_masking(self):
        """Whether the system-level feature can be computed from a subset
        of entities (needed when some entities are held out)."""
        return self.kind in ("zero", "oob_count", "elapsed_since_predicate")


def zero_recurrence():
    return RecurrenceSpec(kind="zero")


def _rbf(x, params):
    center = np.asarray(params.get("center", np.zeros(x.shape[-1])), dtype=np.float64)
    bandwidth = float(params.get("bandwidth", 1.0))
    scale = float(params.get("scale", 1.0))
    d2 = ((x - center) ** 2).sum(axis=-1)
    return scale * np.exp(-d2 / (2.0 * bandwidth**2))


def _oob_indicators(x, params):
    lo = np.asarray(params.get("lo", np.zeros(x.shape[-1])), dtype=np.float64)
    hi = np.asarray(params.get("hi", np.ones(x.shape[-1])), dtype=np.float64)
    below = (x < lo).astype(np.float64)
    above = (x > hi).astype(np.float64)
    return np.stack([below, above], axis=-1).reshape(x.shape[:-1] + (2 * x.shape[-1],))


def _oob_mask(obs, params):
    lo = float(params.get("lo", 0.0))
    hi = float(params.get("hi", 1.0))
    return ((obs <= lo) | (obs >= hi)).any(axis=-1)


def batch_entity_features(spec, observations, covariates=None):
    """Features for every (timestep, entity): [T, J, d_f].

    ``observations`` is [T, J, D]; feature row t is computed from the
    observation at t (it feeds the transition into t+1).
    """
    obs = np.asarray(observations, dtype=np.float64)
    T, J, D = obs.shape
    if spec.kind == "zero":
        feats = np.zeros((T, J, 0))
    elif spec.kind == "identity":
        feats = obs.copy()
    elif spec.kind == "rbf":
        feats = _rbf(obs, spec.params)[..., None]
    elif spec.kind == "out_of_bounds_indicators":
        feats = _oob_indicators(obs, spec.params)
    elif spec.kind == "custom":
        fn = spec.params["fn"]
        feats = np.stack([np.stack([np.atleast_1d(fn(obs[t, j])) for j in range(J)]) for t in range(T)])
    else:
        raise MissingEntityIndex(f"{spec.kind} is a system-level featurization")
    if spec.covariate_dim:
        if covariates is None:
            raise FeatureDimMismatch("covariates declared but not provided")
        feats = np.concatenate([feats, np.asarray(covariates, dtype=np.float64)], axis=-1)
    return feats


def batch_system_features(spec, observations, covariates=None, entity_mask=None,
                          example_starts=None):
    """System-level features per timestep: [T, d_g].

    ``entity_mask`` ([T, J] bool, True = usable) restricts reduction
    kinds to observed entities; kinds that read raw per-entity values
    refuse masking to avoid information leaks.  ``example_starts`` resets
    history-dependent kinds at example boundaries.
    """
    obs = np.asarray(observations, dtype=np.float64)
    T, J, D = obs.shape
    if entity_mask is not None and not np.all(entity_mask) and not spec.supports_masking():
        raise MissingEntityIndex(
            f"system recurrence kind {spec.kind!r} cannot be evaluated with held-out entities")
    if spec.kind == "zero":
        feats = np.zeros((T, 0))
    elif spec.kind == "identity":
        feats = obs.reshape(T, J * D).copy()
    elif spec.kind == "oob_count":
        oob = _oob_mask(obs, spec.params)
        if entity_mask is not None:
            oob = oob & entity_mask
        feats = oob.sum(axis=1).astype(np.float64)[:, None]
    elif spec.kind == "elapsed_since_predicate":
        held = _predicate_holds(obs, spec.params)
        if entity_mask is not None:
            held = held & entity_mask
        any_held = held.any(axis=1)
        horizon = float(spec.params.get("horizon", 100.0))
        start_set = set() if example_starts is None else set(int(t) for t in example_starts)
        elapsed = np.empty(T)
        since = np.inf
        for t in range(T):
            if t in start_set:
                since = np.inf
            if any_held[t]:
                since = 0.0
            else:
                since += 1.0
            elapsed[t] = min(since / horizon, 1.0)
        feats = elapsed[:, None]
    elif spec.kind == "rbf":
        feats = _rbf(obs.reshape(T, J * D), spec.params)[:, None]
    elif spec.kind == "out_of_bounds_indicators":
        feats = _oob_indicators(obs.reshape(T, J * D), spec.params)
    elif spec.kind == "custom":
        fn = spec.params["fn"]
        feats = np.stack([np.atleast_1d(fn(obs[t])) for t in range(T)])
    else:
        raise AssertionError
    if spec.covariate_dim:
        if covariates is None:
            raise FeatureDimMismatch("covariates declared but not provided")
        feats = np.concatenate([feats, np.asarray(covariates, dtype=np.float64)], axis=-1)
    return feats


def _predicate_holds(obs, params):
    """Interval predicate on one observation dimension: lo <= x_d < hi."""
    dim = int(params.get("dim", 0))
    lo = float(params.get("lo", 0.0))
    hi = float(params.get("hi", 1.0))
    return (obs[:, :, dim] >= lo) & (obs[:, :, dim] < hi)


def evaluate_recurrence(spec, observations, covariates, t, entity=None):
    """Feature vector consumed by the transition into timestep ``t``.

    Reads the observation at ``t - 1``; entity-level kinds require
    ``entity``.
    """
    if t < 1:
        raise ValueError("features consume the previous observation; t must be >= 1")
    obs = np.asarray(observations, dtype=np.float64)
    if spec.is_entity_level and spec.kind != "zero":
        if entity is None:
            raise MissingEntityIndex(f"recurrence kind {spec.kind!r} requires an entity index")
        cov = None
        if spec.covariate_dim:
            cov = np.asarray(covariates, dtype=np.float64)[t - 1 : t, entity : entity + 1]
        return batch_entity_features(spec, obs[t - 1 : t, entity : entity + 1], cov)[0, 0]
    cov = None
    if spec.covariate_dim:
        cov = np.asarray(covariates, dtype=np.float64)[: t]
    # history-dependent kinds need the full prefix
    return batch_system_features(spec, obs[:t], cov)[t - 1]


# ---------------------------------------------------------------------------
# transition parameter blocks


@dataclass
class SystemTransitionParams:
    """System chain transition preferences plus recurrence weights.

    log_tpm: [L, L] utility matrix (row = previous state; softmax of a
    row with zero features recovers the baseline transition
    distribution); recurrence_weights: [L, d_g].
    """

    log_tpm: np.ndarray
    recurrence_weights: np.ndarray

    def __post_init__(self):
        self.log_tpm = np.ascontiguousarray(self.log_tpm, dtype=np.float64)
        self.recurrence_weights = np.ascontiguousarray(self.recurrence_weights, dtype=np.float64)
        if self.recurrence_weights.shape[0] != self.log_tpm.shape[0]:
            raise FeatureDimMismatch("recurrence weights rows must match state count")

    @property
    def n_states(self):
        return self.log_tpm.shape[0]

    @property
    def feature_dim(self):
        return self.recurrence_weights.shape[1]

    def tpm(self):
        """Baseline transition matrix (recurrence contribution zero)."""
        return np.exp(log_softmax(self.log_tpm))


@dataclass
class EntityTransitionParams:
    """Per-entity, per-system-state transition blocks.

    log_tpms: [J, L, K, K]; recurrence_weights: [J, L, K, d_f].  The
    active system state selects which (log_tpm, weights) pair drives the
    entity's next-state distribution.
    """

    log_tpms: np.ndarray
    recurrence_weights: np.ndarray

    def __post_init__(self):
        self.log_tpms = np.ascontiguousarray(self.log_tpms, dtype=np.float64)
        self.recurrence_weights = np.ascontiguousarray(self.recurrence_weights, dtype=np.float64)
        if self.log_tpms.shape[:3] != self.recurrence_weights.shape[:3]:
            raise FeatureDimMismatch("transition and weight blocks must align")

    @property
    def n_entities(self):
        return self.log_tpms.shape[0]

    @property
    def n_system_states(self):
        return self.log_tpms.shape[1]

    @property
    def n_states(self):
        return self.log_tpms.shape[2]

    @property
    def feature_dim(self):
        return self.recurrence_weights.shape[3]


def system_transition_log_probs(params, s_prev, g_features):
    """Log next-state distribution for the system chain."""
    g = np.asarray(g_features, dtype=np.float64)
    if g.shape != (params.feature_dim,):
        raise FeatureDimMismatch(f"expected {params.feature_dim} features, got {g.shape}")
    util = params.log_tpm[s_prev] + params.recurrence_weights @ g
    return log_softmax(util)


def entity_transition_log_probs(params, j, l, z_prev, f_features):
    """Log next-state distribution for entity ``j`` under system state ``l``."""
    f = np.asarray(f_features, dtype=np.float64)
    if f.shape != (params.feature_dim,):
        raise FeatureDimMismatch(f"expected {params.feature_dim} features, got {f.shape}")
    util = params.log_tpms[j, l, z_prev] + params.recurrence_weights[j, l] @ f
    return log_softmax(util)


def system_log_trans_series(params, feats):
    """[T-1, L, L] normalized log transition matrices from a feature series."""
    Tm1 = feats.shape[0]
    L = params.n_states
    if params.feature_dim:
        bias = feats @ params.recurrence_weights.T
    else:
        bias = np.zeros((Tm1, L))
    util = params.log_tpm[None, :, :] + bias[:, None, :]
    return log_softmax(util)


def entity_log_trans_tensor(params, j, feats):
    """[T-1, L, K, K] normalized log transitions for one entity."""
    Tm1 = feats.shape[0]
    L, K = params.n_system_states, params.n_states
    out = np.empty((Tm1, L, K, K))
    if Tm1 == 0:
        return out
    W = params.recurrence_weights[j]
    if params.feature_dim == 0:
        out[:] = log_softmax(params.log_tpms[j])[None]
        return out
    return _kernels.entity_log_trans_tensor(params.log_tpms[j], W, np.ascontiguousarray(feats), out)
