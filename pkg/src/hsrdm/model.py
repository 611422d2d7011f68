"""Full two-level model: parameter bundle, joint log density, simulation.

A system-level discrete chain modulates per-entity discrete chains,
which in turn drive autoregressive emissions; observations feed back
into both levels' transitions.  Datasets may stack several independent
examples; the initial distributions take over at every example start.
"""

from dataclasses import dataclass, field

import numpy as np

from . import emissions as em
from . import transitions as tr
from .errors import EmptyDataset
from .simplex import log_softmax, validate_prob_vector


@dataclass
class TimeSeriesDataset:
    """Stacked observations for J entities over T total timesteps.

    ``example_end_times`` holds the exclusive end index of each example
    (strictly increasing, last equals T), so example e covers
    [end[e-1], end[e]).
    """

    observations: np.ndarray
    example_end_times: np.ndarray
    system_covariates: np.ndarray = None
    entity_covariates: np.ndarray = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        if self.observations.ndim != 3:
            raise ValueError("observations must be [T, J, D]")
        if self.observations.shape[0] == 0:
            raise EmptyDataset("dataset has no timesteps")
        if not np.all(np.isfinite(self.observations)):
            raise ValueError("observations contain non-finite values")
        ends = np.asarray(self.example_end_times, dtype=np.int64).reshape(-1)
        if ends.size == 0 or np.any(np.diff(ends) <= 0) or ends[-1] != self.n_timesteps or ends[0] <= 0:
            raise ValueError("example_end_times must be strictly increasing and end at T")
        self.example_end_times = ends

    @property
    def n_timesteps(self):
        return self.observations.shape[0]

    @property
    def n_entities(self):
        return self.observations.shape[1]

    @property
    def obs_dim(self):
        return self.observations.shape[2]

    @property
    def n_examples(self):
        return self.example_end_times.shape[0]

    @property
    def example_starts(self):
        return np.concatenate([[0], self.example_end_times[:-1]])

    def start_mask(self):
        """[T] bool, True at the first timestep of each example."""
        mask = np.zeros(self.n_timesteps, dtype=bool)
        mask[self.example_starts] = True
        return mask

    def boundary_transition_mask(self):
        """[T-1] bool, True where the transition t -> t+1 crosses examples."""
        return self.start_mask()[1:]

    def entity_series(self, j):
        return self.observations[:, j, :]

    def extract_entity(self, j):
        """Single-entity view (used to fit per-entity chains separately)."""
        cov = None if self.entity_covariates is None else self.entity_covariates[:, j : j + 1]
        return TimeSeriesDataset(
            observations=self.observations[:, j : j + 1, :].copy(),
            example_end_times=self.example_end_times.copy(),
            system_covariates=None if self.system_covariates is None else self.system_covariates.copy(),
            entity_covariates=cov,
        )


@dataclass
class LatentTrajectories:
    """Hard state sequences: system_states [T], entity_states [T, J]."""

    system_states: np.ndarray
    entity_states: np.ndarray

    def __post_init__(self):
        self.system_states = np.asarray(self.system_states, dtype=np.int64)
        self.entity_states = np.asarray(self.entity_states, dtype=np.int64)


@dataclass
class InitParams:
    """Everything that replaces transitions/emissions at example starts."""

    pi_system: np.ndarray
    pi_entity: np.ndarray  # [J, K]
    initial_emissions: list  # [J][K] initial-observation params

    def __post_init__(self):
        self.pi_system = validate_prob_vector(self.pi_system, "pi_system")
        self.pi_entity = np.asarray(self.pi_entity, dtype=np.float64)
        for j in range(self.pi_entity.shape[0]):
            validate_prob_vector(self.pi_entity[j], f"pi_entity[{j}]")


@dataclass
class ModelParams:
    """Complete parameter bundle.

    theta_system / theta_entity are the transition blocks, theta_emission
    holds per-(entity, state) emission parameters, theta_init the initial
    distributions and initial-observation models.  The recurrence specs
    are part of the model definition (fixed featurizations).
    """

    theta_system: tr.SystemTransitionParams
    theta_entity: tr.EntityTransitionParams
    theta_emission: list  # [J][K] emission params
    theta_init: InitParams
    system_recurrence: tr.RecurrenceSpec = field(default_factory=tr.zero_recurrence)
    entity_recurrence: tr.RecurrenceSpec = field(default_factory=tr.zero_recurrence)
    emission_family: str = em.GAUSSIAN_VAR

    @property
    def n_system_states(self):
        return self.theta_system.n_states

    @property
    def n_entity_states(self):
        return self.theta_entity.n_states

    @property
    def n_entities(self):
        return self.theta_entity.n_entities


def dataset_features(params, data, entity_mask=None):
    """(system_feats [T, d_g], entity_feats [T, J, d_f]) for a dataset."""
    sys_feats = tr.batch_system_features(
        params.system_recurrence, data.observations, data.system_covariates, entity_mask,
        example_starts=data.example_starts)
    ent_feats = tr.batch_entity_features(
        params.entity_recurrence, data.observations, data.entity_covariates)
    return sys_feats, ent_feats


def complete_data_log_prob(params, data, latents):
    """Joint log density of observations and hard latent trajectories."""
    obs = data.observations
    T, J, _ = obs.shape
    s = latents.system_states
    z = latents.entity_states
    starts = data.start_mask()
    sys_feats, ent_feats = dataset_features(params, data)
    sys_trans = tr.system_log_trans_series(params.theta_system, sys_feats[:-1]) if T > 1 else None

    total = 0.0
    log_pi_s = np.log(params.theta_init.pi_system)
    log_pi_z = np.log(params.theta_init.pi_entity)
    for t in range(T):
        if starts[t]:
            total += log_pi_s[s[t]]
        else:
            total += sys_trans[t - 1, s[t - 1], s[t]]
    for j in range(J):
        ent_trans = tr.entity_log_trans_tensor(params.theta_entity, j, ent_feats[:-1, j]) if T > 1 else None
        for t in range(T):
            if starts[t]:
                total += log_pi_z[j, z[t, j]]
                total += em.initial_log_density(params.theta_init.initial_emissions[j][z[t, j]], obs[t, j])
            else:
                total += ent_trans[t - 1, s[t], z[t - 1, j], z[t, j]]
                total += em.emission_log_density(params.theta_emission[j][z[t, j]], obs[t - 1, j], obs[t, j])
    return float(total)


def sample_model(params, n_timesteps, example_end_times, rng):
    """Ancestral draw from the generative model.

    Per step the order is: system state, then every entity state, then
    every emission; the chain restarts from the initial distributions at
    each example boundary.
    """
    J = params.n_entities
    D = _emission_dim(params)
    ends = np.asarray(example_end_times, dtype=np.int64)
    starts = np.zeros(n_timesteps, dtype=bool)
    starts[np.concatenate([[0], ends[:-1]])] = True

    obs = np.zeros((n_timesteps, J, D))
    s = np.zeros(n_timesteps, dtype=np.int64)
    z = np.zeros((n_timesteps, J), dtype=np.int64)

    if params.system_recurrence.covariate_dim or params.entity_recurrence.covariate_dim:
        raise ValueError("sample_model does not supply exogenous covariates")

    pi_s = params.theta_init.pi_system
    pi_z = params.theta_init.pi_entity
    for t in range(n_timesteps):
        if starts[t]:
            s[t] = _categorical(pi_s, rng)
            for j in range(J):
                z[t, j] = _categorical(pi_z[j], rng)
                obs[t, j] = em.initial_sample(params.theta_init.initial_emissions[j][z[t, j]], rng)
        else:
            g = tr.evaluate_recurrence(params.system_recurrence, obs, None, t)
            s[t] = _categorical(np.exp(tr.system_transition_log_probs(params.theta_system, s[t - 1], g)), rng)
            for j in range(J):
                f = tr.evaluate_recurrence(params.entity_recurrence, obs, None, t, entity=j)
                logp = tr.entity_transition_log_probs(params.theta_entity, j, s[t], z[t - 1, j], f)
                z[t, j] = _categorical(np.exp(logp), rng)
                obs[t, j] = em.emission_sample(params.theta_emission[j][z[t, j]], obs[t - 1, j], rng)
    data = TimeSeriesDataset(observations=obs, example_end_times=ends)
    return data, LatentTrajectories(system_states=s, entity_states=z)


def _categorical(probs, rng):
    c = np.cumsum(probs)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right").clip(0, len(probs) - 1))


def _emission_dim(params):
    first = params.theta_emission[0][0]
    if isinstance(first, em.GaussianVarParams):
        return first.dim
    return 1


def uniform_init_params(L, K, J, initial_emissions):
    return InitParams(
        pi_system=np.full(L, 1.0 / L),
        pi_entity=np.full((J, K), 1.0 / K),
        initial_emissions=initial_emissions,
    )


def sticky_log_tpm(n, self_prob):
    """Log of a symmetric sticky transition matrix."""
    if n == 1:
        return np.zeros((1, 1))
    off = (1.0 - self_prob) / (n - 1)
    tpm = np.full((n, n), off)
    np.fill_diagonal(tpm, self_prob)
    return np.log(tpm)
