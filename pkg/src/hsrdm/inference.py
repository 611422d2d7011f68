"""Structured coordinate-ascent variational inference.

The posterior over latent chains factorizes into one system-level chain
factor and one chain factor per entity.  Each coordinate update reduces
to smoothing a surrogate chain:

* system update: transitions are the model's system transitions;
  per-timestep evidence aggregates every entity's expected transition
  log probabilities under the current entity factors,
* entity update: transitions are the system-posterior-weighted geometric
  mean of the per-system-state transition blocks; evidence is the
  autoregressive emission log density.

Cost per sweep is linear in the number of entities.  The M step uses
closed-form weighted MLE for emissions and initial distributions, and
backtracking gradient ascent (closed form when no recurrence features
are present) for the transition blocks.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from . import chain
from . import emissions as em
from . import transitions as tr
from .cluster import kmeans
from .errors import EmptyWeightSet, UnidentifiableRegression
from .model import InitParams, ModelParams, dataset_features, sticky_log_tpm
from .simplex import StickyDirichletPrior, dirichlet_log_density, log_softmax

_EMPTY_STATE_WEIGHT = 1e-6
_MIN_INIT_COUNT = 2.0
_PROB_FLOOR = 1e-12


@dataclass
class CaviConfig:
    """Knobs for coordinate ascent and initialization."""

    n_iterations: int = 10
    m_step_substeps: int = 50
    initial_step: float = 1.0
    backtrack_factor: float = 0.5
    max_line_search_trials: int = 20
    elbo_tolerance: float = 0.0
    seed: int = 0
    bottom_iters: int = 5
    top_iters: int = 20
    init_clustering: str = "observations"  # or "velocities"
    alpha: float = 1.0
    kappa: float = 10.0
    init_concentration: float = 10.0
    init_self_prob_entity: float = 0.90
    init_self_prob_system: float = 0.95
    block_perturbation: float = 0.01
    update_recurrence_params: bool = False
    substep_tolerance: float = 1e-9
    trace_phases: bool = True
    occupancy_smoothing: int = 9

    def __post_init__(self):
        if self.n_iterations < 0 or self.m_step_substeps < 0:
            raise ValueError("iteration counts must be non-negative")
        if not (0 < self.backtrack_factor < 1):
            raise ValueError("backtrack_factor must be in (0, 1)")
        if self.init_clustering not in ("observations", "velocities"):
            raise ValueError("init_clustering must be 'observations' or 'velocities'")


@dataclass
class VariationalPosterior:
    """Chain posteriors: one system factor, one factor per entity."""

    q_system: chain.ChainPosterior
    q_entity: list


@dataclass
class FitContext:
    """Precomputed dataset-level quantities shared by the update steps."""

    data: object
    sys_feats: np.ndarray
    ent_feats: np.ndarray
    starts: np.ndarray
    skip: np.ndarray
    lengths: np.ndarray
    start_indices: np.ndarray

    @classmethod
    def build(cls, params, data, lengths=None):
        T, J = data.n_timesteps, data.n_entities
        lengths = np.full(J, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 1) or np.any(lengths > T):
            raise ValueError("entity lengths must lie in [1, T]")
        entity_mask = None
        if np.any(lengths < T):
            entity_mask = np.arange(T)[:, None] < lengths[None, :]
        sys_feats, ent_feats = dataset_features(params, data, entity_mask)
        return cls(
            data=data,
            sys_feats=sys_feats,
            ent_feats=ent_feats,
            starts=data.start_mask(),
            skip=data.boundary_transition_mask(),
            lengths=lengths,
            start_indices=data.example_starts,
        )

    @property
    def n_timesteps(self):
        return self.data.n_timesteps

    def entity_start_indices(self, j):
        s = self.start_indices
        return s[s < self.lengths[j]]


def _n_threads():
    try:
        return max(1, int(os.environ.get("HSRDM_NUM_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# surrogate chain construction


def entity_emission_log_densities(params, ctx, j):
    """[len_j, K] log evidence: AR dynamics, initial model at example starts."""
    n = ctx.lengths[j]
    obs = ctx.data.entity_series(j)[:n]
    K = params.n_entity_states
    out = np.empty((n, K))
    for k in range(K):
        if n > 1:
            out[1:, k] = em.series_log_density(params.theta_emission[j][k], obs[:-1], obs[1:])
    for t in ctx.entity_start_indices(j):
        for k in range(K):
            out[t, k] = em.initial_log_density(params.theta_init.initial_emissions[j][k], obs[t])
    return out


def entity_trans_tensor(params, ctx, j):
    """[len_j - 1, L, K, K] log transition blocks for one entity."""
    n = ctx.lengths[j]
    return tr.entity_log_trans_tensor(params.theta_entity, j, ctx.ent_feats[: n - 1, j])


def system_log_trans(params, ctx):
    """[T-1, L, L] system log transitions; boundary rows restart from pi."""
    T = ctx.n_timesteps
    A = tr.system_log_trans_series(params.theta_system, ctx.sys_feats[: T - 1])
    if ctx.skip.any():
        A[ctx.skip] = np.log(params.theta_init.pi_system)[None, None, :]
    return A


def ves_emissions(params, ctx, q_entity):
    """[T, L] evidence matrix of the system surrogate chain.

    Non-boundary timesteps aggregate expected entity-transition log
    probabilities (pairwise entity marginals against each system state's
    block); example starts carry the expected entity-initial terms,
    which are constant across system states.
    """
    T = ctx.n_timesteps
    L = params.n_system_states
    E = np.zeros((T, L))
    log_pi_z = np.log(np.maximum(params.theta_init.pi_entity, _PROB_FLOOR))
    for j in range(ctx.data.n_entities):
        n = ctx.lengths[j]
        if n > 1:
            lnp = entity_trans_tensor(params, ctx, j)
            contrib = np.einsum("tlkc,tkc->tl", lnp, q_entity[j].pairwise[: n - 1])
            keep = ~ctx.skip[: n - 1]
            E[1:n][keep] += contrib[keep]
        for t in ctx.entity_start_indices(j):
            E[t] += float(log_pi_z[j] @ q_entity[j].unary[t])
    return E


def ves_step(params, data, q_entity, ctx=None):
    """Update the system chain factor given the entity factors."""
    if ctx is None:
        ctx = FitContext.build(params, data)
    spec = chain.ChainSpec(
        log_init=np.log(params.theta_init.pi_system),
        log_trans=system_log_trans(params, ctx),
        log_emit=ves_emissions(params, ctx, q_entity),
    )
    return chain.smooth(spec)


def vez_step(params, data, q_system, j, ctx=None):
    """Update entity ``j``'s chain factor given the system factor."""
    if ctx is None:
        ctx = FitContext.build(params, data)
    n = ctx.lengths[j]
    log_pi = np.log(np.maximum(params.theta_init.pi_entity[j], _PROB_FLOOR))
    if n > 1:
        lnp = entity_trans_tensor(params, ctx, j)
        log_trans = np.einsum("tlkc,tl->tkc", lnp, q_system.unary[1:n])
        skip = ctx.skip[: n - 1]
        if skip.any():
            log_trans[skip] = log_pi[None, None, :]
    else:
        log_trans = np.zeros((0, params.n_entity_states, params.n_entity_states))
    spec = chain.ChainSpec(
        log_init=log_pi,
        log_emit=entity_emission_log_densities(params, ctx, j),
        log_trans=log_trans,
    )
    return chain.smooth(spec)


def vez_all(params, data, q_system, ctx):
    n_threads = _n_threads()
    J = data.n_entities
    if n_threads == 1 or J == 1:
        return [vez_step(params, data, q_system, j, ctx) for j in range(J)]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(lambda j: vez_step(params, data, q_system, j, ctx), range(J)))


# ---------------------------------------------------------------------------
# evidence lower bound


def compute_elbo(params, data, q_system, q_entity, ctx=None):
    """Energy (expected complete-data log density) plus chain entropies."""
    if ctx is None:
        ctx = FitContext.build(params, data)
    T = ctx.n_timesteps
    starts = ctx.start_indices

    energy = float((q_system.unary[starts] @ np.log(np.maximum(params.theta_init.pi_system, _PROB_FLOOR))).sum())
    if T > 1:
        A = system_log_trans(params, ctx)
        keep = ~ctx.skip
        energy += float((q_system.pairwise[keep] * A[keep]).sum())

    E = ves_emissions(params, ctx, q_entity)
    energy += float((q_system.unary * E).sum())

    for j in range(data.n_entities):
        dens = entity_emission_log_densities(params, ctx, j)
        energy += float((q_entity[j].unary * dens).sum())

    entropy = chain.chain_entropy(q_system)
    entropy += sum(chain.chain_entropy(q) for q in q_entity)
    return energy + entropy


def log_prior(params, config):
    """Log density of the priors the M step optimizes against."""
    L = params.n_system_states
    total = 0.0
    if L > 1:
        prior = StickyDirichletPrior(config.alpha, config.kappa, L)
        rows = np.exp(log_softmax(params.theta_system.log_tpm))
        total += prior.log_density_tpm(np.maximum(rows, _PROB_FLOOR))
    c = config.init_concentration
    if L > 1:
        total += dirichlet_log_density(params.theta_init.pi_system, np.full(L, c))
    K = params.n_entity_states
    if K > 1:
        for j in range(params.n_entities):
            total += dirichlet_log_density(params.theta_init.pi_entity[j], np.full(K, c))
    return float(total)


# ---------------------------------------------------------------------------
# M step


def _dirichlet_map(counts, concentration):
    """Mode of the Dirichlet posterior over one distribution."""
    v = np.maximum(counts + (concentration - 1.0), 0.0) + _PROB_FLOOR
    return v / v.sum()


def _fit_emission_block(params, ctx, j, k, weights):
    """Weighted MLE for one (entity, state) dynamics block; falls back to
    the previous parameters for empty or degenerate assignments."""
    old = params.theta_emission[j][k]
    if weights.sum() < _EMPTY_STATE_WEIGHT:
        return old
    n = ctx.lengths[j]
    obs = ctx.data.entity_series(j)[:n]
    nb = ~ctx.starts[:n]
    x_prev = obs[:-1][nb[1:]]
    x_curr = obs[1:][nb[1:]]
    w = weights[1:][nb[1:]]
    try:
        if params.emission_family == em.GAUSSIAN_VAR:
            return em.fit_gaussian_var_weighted(x_prev, x_curr, w)
        new = em.fit_von_mises_ar_weighted(x_prev, x_curr, w)
        # the circular fit is approximate: keep whichever scores better
        if em.weighted_log_likelihood(new, x_prev, x_curr, w) >= em.weighted_log_likelihood(old, x_prev, x_curr, w):
            return new
        return old
    except (UnidentifiableRegression, EmptyWeightSet):
        return old


def _fit_initial_block(params, ctx, j, k, weights):
    old = params.theta_init.initial_emissions[j][k]
    starts = ctx.entity_start_indices(j)
    if starts.size == 0:
        return old
    w = weights[starts]
    wsum = w.sum()
    if wsum < _EMPTY_STATE_WEIGHT:
        return old
    rows = ctx.data.entity_series(j)[starts]
    try:
        if params.emission_family == em.GAUSSIAN_VAR:
            if wsum < _MIN_INIT_COUNT:
                # too few effective points for a covariance: move the mean only
                mean = (rows * w[:, None]).sum(axis=0) / wsum
                return em.GaussianInitParams(mean=mean, cov=old.cov.copy())
            return em.fit_gaussian_init_weighted(rows, w)
        new = em.fit_von_mises_init_weighted(rows, w)
        if wsum < _MIN_INIT_COUNT:
            return em.VonMisesInitParams(mean=new.mean, concentration=old.concentration)
        return new
    except EmptyWeightSet:
        return old


def _ascend(value_and_grad, arrays, config, substeps):
    """Backtracking gradient ascent; guarantees the objective never
    decreases.  ``value_and_grad(arrays, want_grad)`` returns
    (obj, [grads]).  Stops early once the relative improvement falls
    below the configured substep tolerance."""
    obj, grads = value_and_grad(arrays, True)
    step = config.initial_step
    for _ in range(substeps):
        accepted = False
        trial = step
        for _ in range(config.max_line_search_trials):
            cand = [a + trial * g for a, g in zip(arrays, grads)]
            cand_obj, cand_grads = value_and_grad(cand, True)
            if cand_obj >= obj and np.isfinite(cand_obj):
                gain = cand_obj - obj
                arrays, obj, grads = cand, cand_obj, cand_grads
                step = min(trial * 2.0, 1e3)
                accepted = True
                break
            trial *= config.backtrack_factor
        if not accepted:
            break
        if gain <= config.substep_tolerance * max(1.0, abs(obj)):
            break
    return arrays, obj


def _update_system_transitions(params, ctx, q_system, config):
    L = params.n_system_states
    T = ctx.n_timesteps
    if T < 2 or L == 0:
        return params.theta_system
    keep = ~ctx.skip
    pair = np.ascontiguousarray(q_system.pairwise[keep])
    prior_conc = StickyDirichletPrior(config.alpha, config.kappa, L) if L > 1 else None

    if params.theta_system.feature_dim == 0:
        counts = pair.sum(axis=0)
        rows = np.empty((L, L))
        for l in range(L):
            conc = prior_conc.concentration(l) if prior_conc else np.ones(L)
            if counts[l].sum() + (conc - 1.0).sum() <= 0:
                rows[l] = np.exp(log_softmax(params.theta_system.log_tpm[l]))
            else:
                rows[l] = _dirichlet_map(counts[l], conc)
        return tr.SystemTransitionParams(
            log_tpm=np.log(rows), recurrence_weights=params.theta_system.recurrence_weights.copy())

    feats = np.ascontiguousarray(ctx.sys_feats[: T - 1][keep])
    norm = max(1.0, pair.sum())
    conc_rows = np.stack([prior_conc.concentration(l) - 1.0 for l in range(L)]) if prior_conc else np.zeros((L, L))

    def value_and_grad(arrays, want_grad):
        P, Om = arrays
        bias = feats @ Om.T
        obj, g_base, g_bias = _kernels.catglm_obj_grad(
            np.ascontiguousarray(P), np.ascontiguousarray(bias), pair, want_grad)
        logrows = log_softmax(P)
        obj += float((conc_rows * logrows).sum())
        if not want_grad:
            return obj / norm, None
        rows = np.exp(logrows)
        g_prior = conc_rows - conc_rows.sum(axis=1, keepdims=True) * rows
        gP = (g_base + g_prior) / norm
        gOm = (g_bias.T @ feats) / norm
        return obj / norm, [gP, gOm]

    (P, Om), _ = _ascend(
        value_and_grad,
        [params.theta_system.log_tpm.copy(), params.theta_system.recurrence_weights.copy()],
        config, config.m_step_substeps)
    return tr.SystemTransitionParams(log_tpm=P, recurrence_weights=Om)


def _update_entity_transitions(params, ctx, q_system, q_entity, config):
    theta = params.theta_entity
    J, L, K = theta.n_entities, theta.n_system_states, theta.n_states
    T = ctx.n_timesteps
    if T < 2:
        return theta
    qs = np.ascontiguousarray(q_system.unary)
    pairs = np.zeros((J, T - 1, K, K))
    for j in range(J):
        n = ctx.lengths[j]
        if n > 1:
            pairs[j, : n - 1] = q_entity[j].pairwise[: n - 1]
    skip = np.ascontiguousarray(ctx.skip.astype(np.uint8))
    lengths = np.ascontiguousarray(ctx.lengths)

    if theta.feature_dim == 0:
        # closed form: expected transition counts per (entity, system state)
        keep = (~ctx.skip).astype(np.float64)
        counts = np.einsum("jtkc,tl,t->jlkc", pairs, qs[1:], keep)
        tpms = theta.log_tpms.copy()
        for j in range(J):
            for l in range(L):
                for k in range(K):
                    row = counts[j, l, k]
                    if row.sum() <= 0:
                        continue
                    tpms[j, l, k] = np.log(_dirichlet_map(row, np.ones(K)))
        return tr.EntityTransitionParams(log_tpms=tpms, recurrence_weights=theta.recurrence_weights.copy())

    feats = np.ascontiguousarray(ctx.ent_feats[: T - 1])
    norm = max(1.0, float(sum(q_entity[j].pairwise[~ctx.skip[: ctx.lengths[j] - 1]].sum()
                              for j in range(J) if ctx.lengths[j] > 1)))

    def value_and_grad(arrays, want_grad):
        bases, Ws = arrays
        obj, g_bases, g_Ws = _kernels.entity_catglm_obj_grad(
            np.ascontiguousarray(bases), np.ascontiguousarray(Ws), feats, pairs, qs,
            skip, lengths, want_grad)
        if not want_grad:
            return obj / norm, None
        return obj / norm, [g_bases / norm, g_Ws / norm]

    (bases, Ws), _ = _ascend(
        value_and_grad, [theta.log_tpms.copy(), theta.recurrence_weights.copy()],
        config, config.m_step_substeps)
    return tr.EntityTransitionParams(log_tpms=bases, recurrence_weights=Ws)


def m_step(params, data, q_system, q_entity, config, ctx=None, *,
           update_emissions=True, update_transitions=True, update_init=True,
           update_system=True):
    """One maximization sweep; returns a new parameter bundle."""
    if ctx is None:
        ctx = FitContext.build(params, data)
    J, K, L = params.n_entities, params.n_entity_states, params.n_system_states

    theta_emission = params.theta_emission
    init_emissions = params.theta_init.initial_emissions
    if update_emissions:
        theta_emission = [
            [_fit_emission_block(params, ctx, j, k, q_entity[j].unary[:, k]) for k in range(K)]
            for j in range(J)
        ]
    if update_init:
        init_emissions = [
            [_fit_initial_block(params, ctx, j, k, q_entity[j].unary[:, k]) for k in range(K)]
            for j in range(J)
        ]

    pi_system = params.theta_init.pi_system
    pi_entity = params.theta_init.pi_entity
    if update_init:
        c = config.init_concentration
        s_counts = q_system.unary[ctx.start_indices].sum(axis=0)
        pi_system = _dirichlet_map(s_counts, np.full(L, c))
        pi_entity = np.empty((J, K))
        for j in range(J):
            z_counts = q_entity[j].unary[ctx.entity_start_indices(j)].sum(axis=0)
            pi_entity[j] = _dirichlet_map(z_counts, np.full(K, c))

    theta_init = InitParams(pi_system=pi_system, pi_entity=pi_entity, initial_emissions=init_emissions)
    params = replace(params, theta_init=theta_init, theta_emission=theta_emission)

    theta_system = params.theta_system
    theta_entity = params.theta_entity
    if update_transitions and update_system:
        theta_system = _update_system_transitions(params, ctx, q_system, config)
    if update_transitions:
        theta_entity = _update_entity_transitions(params, ctx, q_system, q_entity, config)
    return replace(params, theta_system=theta_system, theta_entity=theta_entity)


# ---------------------------------------------------------------------------
# smart initialization


def _smooth_within_examples(rows, end_times, window):
    """Per-example moving average along the time axis."""
    if window <= 1:
        return rows
    out = np.empty_like(rows)
    kernel = np.ones(window) / window
    start = 0
    for end in end_times:
        seg = rows[start:end]
        for c in range(rows.shape[1]):
            out[start:end, c] = np.convolve(seg[:, c], kernel, mode="same")
        # renormalize the edge effect of the truncated kernel
        denom = np.convolve(np.ones(seg.shape[0]), kernel, mode="same")
        out[start:end] /= denom[:, None]
        start = end
    return out


def _cluster_labels(obs, starts, K, family, mode, seed):
    """Hard state labels per timestep from k-means on observations or
    discrete derivatives."""
    T = obs.shape[0]
    if family == em.VON_MISES_AR:
        angles = obs.reshape(T)
        points = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        if mode == "velocities":
            d = em.wrap_angle(angles[1:] - angles[:-1])[:, None]
            points = d
    else:
        points = obs
        if mode == "velocities":
            points = obs[1:] - obs[:-1]
    if mode == "velocities":
        valid = ~starts[1:]
        rows = points[valid]
        k_eff = min(K, rows.shape[0])
        labels_valid, centers = kmeans(rows, k_eff, seed)
        labels = np.zeros(T, dtype=np.int64)
        labels[1:][valid] = labels_valid
        if T > 1:
            labels[0] = labels[1]
        for t in np.flatnonzero(starts):
            labels[t] = labels[min(t + 1, T - 1)]
        return labels
    k_eff = min(K, points.shape[0])
    labels, _ = kmeans(points, k_eff, seed)
    return labels


def _pre_init_entity(data, j, K, family, entity_recurrence, config, rng, seed, length):
    """Stage-one pre-initialization for one entity's single-level chain."""
    obs = data.entity_series(j)[:length]
    T, D = obs.shape
    starts = data.start_mask()[:length]
    labels = _cluster_labels(obs, starts, K, family, config.init_clustering, seed)

    nb = ~starts
    x_prev_all = obs[:-1][nb[1:]]
    x_curr_all = obs[1:][nb[1:]]
    lab_all = labels[1:][nb[1:]]

    def fit_pairs(xp, xc):
        if family == em.GAUSSIAN_VAR:
            return em.fit_gaussian_var_weighted(xp, xc, np.ones(len(xp)))
        return em.fit_von_mises_ar_weighted(xp, xc, np.ones(len(xp)))

    try:
        global_fit = fit_pairs(x_prev_all, x_curr_all)
    except (UnidentifiableRegression, EmptyWeightSet):
        global_fit = (em.GaussianVarParams(A=np.eye(D), b=np.zeros(D), Q=np.eye(D))
                      if family == em.GAUSSIAN_VAR else em.VonMisesArParams(1.0, 0.0, 1.0))

    emission_params = []
    for k in range(K):
        mask = lab_all == k
        if mask.sum() < D + 2:
            emission_params.append(global_fit)
            continue
        try:
            emission_params.append(fit_pairs(x_prev_all[mask], x_curr_all[mask]))
        except (UnidentifiableRegression, EmptyWeightSet):
            emission_params.append(global_fit)

    start_rows = obs[starts]
    if family == em.GAUSSIAN_VAR:
        mean = start_rows.mean(axis=0)
        cov = np.cov(obs.T) if T > 1 else np.eye(D)
        cov = em.regularize_covariance(np.atleast_2d(cov))
        init_emissions = [em.GaussianInitParams(mean=mean.copy(), cov=cov.copy()) for _ in range(K)]
    else:
        base = em.fit_von_mises_init_weighted(start_rows.reshape(-1), np.ones(start_rows.shape[0]))
        init_emissions = [em.VonMisesInitParams(base.mean, base.concentration) for _ in range(K)]

    d_f = entity_recurrence.output_dim(D)
    log_tpm = sticky_log_tpm(K, config.init_self_prob_entity)
    W = rng.standard_normal((K, d_f)) if d_f else np.zeros((K, 0))
    return emission_params, init_emissions, log_tpm, W


def smart_initialize(data, L, K, config, system_recurrence=None, entity_recurrence=None,
                     emission_family=em.GAUSSIAN_VAR, entity_seed_indices=None, lengths=None):
    """Two-stage data-informed initialization.

    Stage one fits an independent single-level chain per entity (k-means
    pre-initialization, then EM).  Stage two fits the system-level chain
    over the decoded entity states, differentiating the per-system-state
    transition blocks.  Deterministic given the config seed.
    """
    system_recurrence = system_recurrence or tr.zero_recurrence()
    entity_recurrence = entity_recurrence or tr.zero_recurrence()
    J, D = data.n_entities, data.obs_dim
    if entity_seed_indices is None:
        entity_seed_indices = list(range(J))
    if lengths is None:
        lengths = np.full(J, data.n_timesteps, dtype=np.int64)

    entity_rngs = [np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(int(i),)))
                   for i in entity_seed_indices]
    entity_seeds = [int(np.random.SeedSequence(config.seed, spawn_key=(int(i), 1)).generate_state(1)[0])
                    for i in entity_seed_indices]
    system_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2**31,)))

    # ---- stage one: per-entity chains (system level collapsed) ----
    d_f = entity_recurrence.output_dim(D)
    emission_blocks, init_blocks = [], []
    tpms_1 = np.empty((J, 1, K, K))
    Ws_1 = np.empty((J, 1, K, d_f))
    for j in range(J):
        e_params, i_params, log_tpm, W = _pre_init_entity(
            data, j, K, emission_family, entity_recurrence, config, entity_rngs[j],
            entity_seeds[j], lengths[j])
        emission_blocks.append(e_params)
        init_blocks.append(i_params)
        tpms_1[j, 0] = log_tpm
        Ws_1[j, 0] = W

    params1 = ModelParams(
        theta_system=tr.SystemTransitionParams(log_tpm=np.zeros((1, 1)), recurrence_weights=np.zeros((1, 0))),
        theta_entity=tr.EntityTransitionParams(log_tpms=tpms_1, recurrence_weights=Ws_1),
        theta_emission=emission_blocks,
        theta_init=InitParams(pi_system=np.ones(1), pi_entity=np.full((J, K), 1.0 / K),
                              initial_emissions=init_blocks),
        system_recurrence=tr.zero_recurrence(),
        entity_recurrence=entity_recurrence,
        emission_family=emission_family,
    )
    ctx1 = FitContext.build(params1, data, lengths)
    q_sys1 = chain.posterior_from_labels(np.zeros(data.n_timesteps, dtype=np.int64), 1)
    q_entity = vez_all(params1, data, q_sys1, ctx1)
    for _ in range(config.bottom_iters):
        params1 = m_step(params1, data, q_sys1, q_entity, config, ctx1, update_system=False)
        q_entity = vez_all(params1, data, q_sys1, ctx1)

    # ---- stage two: top-level chain over decoded entity states ----
    d_g = system_recurrence.output_dim(D, J)
    tpms = np.repeat(params1.theta_entity.log_tpms, L, axis=1).copy()
    Ws = np.repeat(params1.theta_entity.recurrence_weights, L, axis=1).copy()
    if L > 1 and config.block_perturbation > 0:
        # identical per-system-state blocks are a symmetric fixed point of
        # every update; a small perturbation lets the states differentiate
        for j in range(J):
            tpms[j] += config.block_perturbation * entity_rngs[j].standard_normal(tpms[j].shape)
            if d_f:
                Ws[j] += config.block_perturbation * entity_rngs[j].standard_normal(Ws[j].shape)

    params = ModelParams(
        theta_system=tr.SystemTransitionParams(
            log_tpm=sticky_log_tpm(L, config.init_self_prob_system),
            recurrence_weights=(system_rng.standard_normal((L, d_g)) if d_g else np.zeros((L, 0))),
        ),
        theta_entity=tr.EntityTransitionParams(log_tpms=tpms, recurrence_weights=Ws),
        theta_emission=params1.theta_emission,
        theta_init=InitParams(pi_system=np.full(L, 1.0 / L),
                              pi_entity=params1.theta_init.pi_entity,
                              initial_emissions=params1.theta_init.initial_emissions),
        system_recurrence=system_recurrence,
        entity_recurrence=entity_recurrence,
        emission_family=emission_family,
    )
    ctx = FitContext.build(params, data, lengths)
    hard_qz = [chain.posterior_from_labels(q.unary.argmax(axis=1), K) for q in q_entity]
    if L > 1:
        # pre-initialize the top-level chain the same way the bottom level
        # was: cluster its "observations" (the entity-state occupancies)
        # over timesteps; starting the top-level EM from its symmetric
        # point instead would leave the per-system-state blocks identical
        occupancy = np.concatenate([q.unary for q in q_entity], axis=1)
        occupancy = _smooth_within_examples(occupancy, data.example_end_times,
                                            config.occupancy_smoothing)
        top_seed = int(np.random.SeedSequence(config.seed, spawn_key=(2**31, 1)).generate_state(1)[0])
        s_labels, _ = kmeans(occupancy, min(L, occupancy.shape[0]), top_seed)
        q_system = chain.posterior_from_labels(s_labels, L)
        params = m_step(params, data, q_system, hard_qz, config, ctx, update_emissions=False)
    q_system = ves_step(params, data, hard_qz, ctx)
    for _ in range(config.top_iters):
        params = m_step(params, data, q_system, hard_qz, config, ctx,
                        update_emissions=False)
        q_system = ves_step(params, data, hard_qz, ctx)

    return params, VariationalPosterior(q_system=q_system, q_entity=q_entity)


# ---------------------------------------------------------------------------
# CAVI driver


def run_cavi(data, L, K, system_recurrence=None, entity_recurrence=None, config=None,
             emission_family=em.GAUSSIAN_VAR, entity_seed_indices=None, lengths=None):
    """Full fit: smart initialization then coordinate ascent.

    Returns (params, posterior, trace) where ``trace`` rows are
    (iteration, phase, objective) and the objective is ELBO + log prior;
    it is non-decreasing across phases up to numerical tolerance.
    """
    config = config or CaviConfig()
    params, posterior = smart_initialize(
        data, L, K, config, system_recurrence, entity_recurrence, emission_family,
        entity_seed_indices, lengths)
    ctx = FitContext.build(params, data, lengths)
    q_entity = posterior.q_entity
    trace = []
    prev_obj = None
    for it in range(config.n_iterations):
        q_system = ves_step(params, data, q_entity, ctx)
        if config.trace_phases:
            trace.append((it, "ves", compute_elbo(params, data, q_system, q_entity, ctx) + log_prior(params, config)))
        q_entity = vez_all(params, data, q_system, ctx)
        if config.trace_phases:
            trace.append((it, "vez", compute_elbo(params, data, q_system, q_entity, ctx) + log_prior(params, config)))
        params = m_step(params, data, q_system, q_entity, config, ctx)
        obj = compute_elbo(params, data, q_system, q_entity, ctx) + log_prior(params, config)
        trace.append((it, "m", obj))
        if prev_obj is not None and config.elbo_tolerance > 0:
            if abs(obj - prev_obj) <= config.elbo_tolerance * abs(prev_obj):
                prev_obj = obj
                break
        prev_obj = obj
    posterior = VariationalPosterior(q_system=ves_step(params, data, q_entity, ctx), q_entity=q_entity)
    return params, posterior, trace


def fit_arhmm_em(data, K, entity_recurrence=None, config=None,
                 emission_family=em.GAUSSIAN_VAR, entity_seed_index=0, lengths=None):
    """EM fit of a single-level chain model (one entity, no system layer).

    Equivalent to ``run_cavi`` with one system state; ``entity_seed_index``
    reproduces the per-entity randomness of a joint fit.
    """
    if data.n_entities != 1:
        raise ValueError("fit_arhmm_em expects a single-entity dataset")
    return run_cavi(data, 1, K, None, entity_recurrence, config, emission_family,
                    entity_seed_indices=[entity_seed_index], lengths=lengths)
