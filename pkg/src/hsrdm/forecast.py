"""Posterior-mean fits and partial forecasting.

Partial forecasting predicts held-out ("target") entities over a horizon
while conditioning on the other ("context") entities observed over that
same horizon: the entity factors are updated only for context entities,
the system factor sees only context evidence over the horizon, the
system path is decoded, and target trajectories are then rolled forward
by ancestral sampling.
"""

from dataclasses import dataclass

import numpy as np

from . import chain
from . import emissions as em
from . import transitions as tr
from .errors import CrossBoundarySlice, NoContextAvailable
from .inference import (FitContext, VariationalPosterior, entity_emission_log_densities,
                        entity_trans_tensor, m_step, system_log_trans, ves_emissions,
                        ves_step, vez_all, vez_step)
from .simplex import log_softmax


@dataclass
class ForecastRequest:
    """What to forecast: which entities, over which (inclusive) horizon."""

    target_entities: tuple
    horizon: tuple  # (start, end) inclusive timestep indices
    n_samples: int = 5
    seed: int = 0

    def __post_init__(self):
        self.target_entities = tuple(sorted(set(int(j) for j in self.target_entities)))
        if not self.target_entities:
            raise ValueError("target entity set is empty")
        start, end = self.horizon
        if end < start:
            raise ValueError("horizon end precedes start")
        self.horizon = (int(start), int(end))


def _example_of(data, t):
    return int(np.searchsorted(data.example_end_times, t, side="right"))


def _check_slice(data, start, end):
    if start < 0 or end >= data.n_timesteps:
        raise CrossBoundarySlice("slice outside the dataset")
    if _example_of(data, start) != _example_of(data, end):
        raise CrossBoundarySlice("slice crosses an example boundary")
    example_start = ([0] + list(data.example_end_times))[_example_of(data, start)]
    if start <= example_start:
        raise CrossBoundarySlice("slice must start after the first timestep of its example")


def posterior_mean_fit(params, data, q_entity, entity, slice_range):
    """Variational posterior-mean trajectory over [start, end] (inclusive).

    Starts from the observed value just before the slice and repeatedly
    applies the posterior-weighted conditional means of the dynamics.
    """
    start, end = int(slice_range[0]), int(slice_range[1])
    _check_slice(data, start, end)
    q = q_entity[entity] if isinstance(q_entity, (list, tuple)) else q_entity.q_entity[entity]
    if q.unary.shape[0] <= end:
        raise ValueError("entity posterior does not cover the slice")
    K = params.n_entity_states
    mu = data.observations[start - 1, entity].astype(np.float64)
    out = np.empty((end - start + 1, data.obs_dim))
    for i, t in enumerate(range(start, end + 1)):
        step = np.zeros(data.obs_dim)
        for k in range(K):
            w = q.unary[t, k]
            if w > 0.0:
                step = step + w * np.asarray(
                    em.emission_conditional_mean(params.theta_emission[entity][k], mu))
        mu = step
        out[i] = mu
    return out


def adjusted_posteriors(params, data, lengths, e_sweeps=2, config=None, refit_iterations=0):
    """E-step sweeps with target entities truncated to their valid prefix.

    Returns (params, posterior, ctx); with ``refit_iterations`` > 0 an
    M step runs between sweeps (otherwise parameters stay frozen).
    """
    ctx = FitContext.build(params, data, lengths)
    prior_spec = chain.ChainSpec(
        log_init=np.log(params.theta_init.pi_system),
        log_trans=system_log_trans(params, ctx),
        log_emit=np.zeros((data.n_timesteps, params.n_system_states)),
    )
    q_system = chain.smooth(prior_spec)
    q_entity = vez_all(params, data, q_system, ctx)
    for _ in range(max(1, e_sweeps) - 1):
        q_system = ves_step(params, data, q_entity, ctx)
        q_entity = vez_all(params, data, q_system, ctx)
    for _ in range(refit_iterations):
        q_system = ves_step(params, data, q_entity, ctx)
        q_entity = vez_all(params, data, q_system, ctx)
        params = m_step(params, data, q_system, q_entity, config, ctx)
        ctx = FitContext.build(params, data, lengths)
    q_system = ves_step(params, data, q_entity, ctx)
    return params, VariationalPosterior(q_system=q_system, q_entity=q_entity), ctx


def _decode_system_path(params, ctx, q_entity):
    spec = chain.ChainSpec(
        log_init=np.log(params.theta_init.pi_system),
        log_trans=system_log_trans(params, ctx),
        log_emit=ves_emissions(params, ctx, q_entity),
    )
    return chain.viterbi(spec)


def _decode_entity_path(params, ctx, q_system, j):
    n = ctx.lengths[j]
    log_pi = np.log(np.maximum(params.theta_init.pi_entity[j], 1e-300))
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
        log_trans=log_trans,
        log_emit=entity_emission_log_densities(params, ctx, j),
    )
    return chain.viterbi(spec)


def decode_states(params, data, e_sweeps=2):
    """Most likely system and entity state paths under the fitted model.

    Runs fresh E-step sweeps with frozen parameters and Viterbi-decodes
    the surrogate chains; returns (system_path [T], entity_paths [T, J]).
    """
    _, posterior, ctx = adjusted_posteriors(params, data, lengths=None, e_sweeps=e_sweeps)
    s_path = _decode_system_path(params, ctx, posterior.q_entity)
    z_paths = np.stack(
        [_decode_entity_path(params, ctx, posterior.q_system, j) for j in range(data.n_entities)],
        axis=1)
    return s_path, z_paths


def partial_forecast(params, data, request, config=None, refit_iterations=0,
                     system_decode="viterbi", e_sweeps=2):
    """Sampled trajectories for the target entities over the horizon.

    Target-entity observations inside the horizon are never read: their
    chain factors stop before the horizon, the system factor sees only
    context evidence there, and the forward simulation consumes its own
    samples.  Deterministic given ``request.seed``.
    """
    t0, t1 = request.horizon
    _check_slice(data, t0, t1)
    targets = request.target_entities
    J = data.n_entities
    if any(j < 0 or j >= J for j in targets):
        raise ValueError("target entity out of range")
    if len(targets) == J and t0 == 0:
        raise NoContextAvailable("no contextual entities and no past observations")

    lengths = np.full(J, data.n_timesteps, dtype=np.int64)
    for j in targets:
        lengths[j] = t0
    params, posterior, ctx = adjusted_posteriors(
        params, data, lengths, e_sweeps=e_sweeps, config=config,
        refit_iterations=refit_iterations)

    horizon_len = t1 - t0 + 1
    D = data.obs_dim
    out = np.empty((request.n_samples, len(targets), horizon_len, D))

    if system_decode == "viterbi":
        s_hat_full = _decode_system_path(params, ctx, posterior.q_entity)
    elif system_decode != "sample":
        raise ValueError("system_decode must be 'viterbi' or 'sample'")

    z_starts = {j: int(_decode_entity_path(params, ctx, posterior.q_system, j)[t0 - 1])
                for j in targets}

    theta_z = params.theta_entity
    for s_idx in range(request.n_samples):
        rng = np.random.default_rng(np.random.SeedSequence(request.seed, spawn_key=(s_idx,)))
        if system_decode == "sample":
            spec = chain.ChainSpec(
                log_init=np.log(params.theta_init.pi_system),
                log_trans=system_log_trans(params, ctx),
                log_emit=ves_emissions(params, ctx, posterior.q_entity),
            )
            post = chain.smooth(spec)
            s_hat = _sample_posterior_path(post, spec, rng)
        else:
            s_hat = s_hat_full
        for j_idx, j in enumerate(targets):
            z_prev = z_starts[j]
            x_prev = data.observations[t0 - 1, j].astype(np.float64)
            for i, tau in enumerate(range(t0, t1 + 1)):
                f = _entity_features(params, x_prev, data, tau, j)
                logp = theta_z.log_tpms[j, s_hat[tau], z_prev]
                if theta_z.feature_dim:
                    logp = logp + theta_z.recurrence_weights[j, s_hat[tau]] @ f
                probs = np.exp(log_softmax(logp))
                z_prev = _categorical(probs, rng)
                x_prev = np.asarray(
                    em.emission_sample(params.theta_emission[j][z_prev], x_prev, rng))
                out[s_idx, j_idx, i] = x_prev
    return out


def _entity_features(params, x_prev, data, tau, j):
    spec = params.entity_recurrence
    if spec.output_dim(data.obs_dim) == 0:
        return np.zeros(0)
    cov = None
    if spec.covariate_dim:
        cov = data.entity_covariates[tau - 1 : tau, j : j + 1]
    return tr.batch_entity_features(spec, x_prev[None, None, :], cov)[0, 0]


def _sample_posterior_path(post, spec, rng):
    """Joint draw from a chain posterior via backward-filter forward-sample."""
    T, n = post.unary.shape
    path = np.empty(T, dtype=np.int64)
    path[0] = _categorical(post.unary[0], rng)
    for t in range(1, T):
        row = post.pairwise[t - 1, :, :]
        cond = row[path[t - 1]]
        s = cond.sum()
        cond = cond / s if s > 0 else np.full(n, 1.0 / n)
        path[t] = _categorical(cond, rng)
    return path


def _categorical(probs, rng):
    c = np.cumsum(probs)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right").clip(0, len(probs) - 1))
