"""Synthetic benchmark generators with ground-truth latent labels.

Two data-generating processes ship with the package:

* ``generate_figure_eight``: a few entities rotate around two tangent
  unit circles, hopping between them near the intersection point when a
  deterministic system clock favors the other loop.

* ``generate_marching_band``: many entities form a sequence of letters
  on the unit square; when enough of them stray out of bounds, the
  routine interrupts with a "come together" reset state before resuming.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .model import LatentTrajectories, TimeSeriesDataset
from .simplex import log_softmax


# ---------------------------------------------------------------------------
# figure eight


@dataclass
class FigureEightConfig:
    n_entities: int = 3
    n_timesteps: int = 400
    periodicities: tuple = (5, 20, 40)
    stickiness: float = 0.999
    # rbf scale/bandwidth picked by simulation sweep: the peak must beat the
    # sticky baseline so loop changes actually happen at the intersection,
    # while the 3-sigma window stays narrow enough to keep orbits through it
    rbf_scale: float = 8.0
    rbf_bandwidth: float = 0.2
    a_high: float = 2.0
    a_low: float = -2.0
    noise_variance: float = 1e-4
    system_period: int = 100
    seed: int = 6

    def __post_init__(self):
        if not 0 < self.stickiness < 1:
            raise ValueError("stickiness must be in (0, 1)")
        if any(p < 3 for p in self.periodicities):
            raise ValueError("periodicities must be >= 3")
        if len(self.periodicities) != self.n_entities:
            raise ValueError("one periodicity per entity required")


FIGURE_EIGHT_CENTERS = (np.array([0.0, 1.0]), np.array([0.0, -1.0]))


def rotation_matrix(period, direction=1):
    theta = direction * 2.0 * math.pi / period
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def figure_eight_dynamics(config):
    """Per-entity (A, b[state]) affine maps rotating about each loop center."""
    out = []
    for tau in config.periodicities:
        A = rotation_matrix(tau)
        bs = [(np.eye(2) - A) @ c for c in FIGURE_EIGHT_CENTERS]
        out.append((A, bs))
    return out


def generate_figure_eight(config=None):
    """Simulate the two-loop benchmark; returns (dataset, latents).

    The system state alternates deterministically every
    ``system_period`` steps; entity states follow a sticky categorical
    GLM whose recurrence term peaks at the loop intersection; emissions
    rotate about the active loop's center with small Gaussian noise.
    """
    config = config or FigureEightConfig()
    rng = np.random.default_rng(config.seed)
    J, T = config.n_entities, config.n_timesteps
    dynamics = figure_eight_dynamics(config)
    log_tpm = np.log(np.array([
        [config.stickiness, 1.0 - config.stickiness],
        [1.0 - config.stickiness, config.stickiness],
    ]))
    # recurrence weights per system state: the favored loop gets a_high
    W = np.array([
        [config.a_high, config.a_low],
        [config.a_low, config.a_high],
    ])
    noise_std = math.sqrt(config.noise_variance)

    obs = np.zeros((T, J, 2))
    z = np.zeros((T, J), dtype=np.int64)
    s = (np.arange(T) // config.system_period) % 2

    for j in range(J):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        obs[0, j] = FIGURE_EIGHT_CENTERS[0] + np.array([math.cos(angle), math.sin(angle)])
        z[0, j] = 0
    for t in range(1, T):
        for j in range(J):
            x_prev = obs[t - 1, j]
            f = config.rbf_scale * math.exp(
                -float(x_prev @ x_prev) / (2.0 * config.rbf_bandwidth**2))
            util = log_tpm[z[t - 1, j]] + W[s[t]] * f
            probs = np.exp(log_softmax(util))
            z[t, j] = int(rng.random() > probs[0])
            A, bs = dynamics[j]
            mean = A @ x_prev + bs[z[t, j]]
            obs[t, j] = mean + noise_std * rng.standard_normal(2)

    data = TimeSeriesDataset(observations=obs, example_end_times=np.array([T]))
    return data, LatentTrajectories(system_states=s, entity_states=z)


# ---------------------------------------------------------------------------
# marching band

# letter stencils as polyline segments on the unit square (stencil coords);
# each letter also carries a horizontal placement box and a sweep period so
# formations are separable: distinct letters occupy distinct field regions
# and fill at distinct tempos
_LETTER_SEGMENTS = {
    "L": [((0.0, 1.0), (0.0, 0.0)), ((0.0, 0.0), (1.0, 0.0))],
    "A": [((0.0, 0.0), (0.5, 1.0)), ((1.0, 0.0), (0.5, 1.0)), ((0.25, 0.45), (0.75, 0.45))],
    "U": [((0.0, 1.0), (0.0, 0.0)), ((0.0, 0.0), (1.0, 0.0)), ((1.0, 0.0), (1.0, 1.0))],
    "G": [((1.0, 1.0), (0.0, 1.0)), ((0.0, 1.0), (0.0, 0.0)), ((0.0, 0.0), (1.0, 0.0)),
          ((1.0, 0.0), (1.0, 0.5)), ((1.0, 0.5), (0.55, 0.5))],
    "H": [((0.0, 1.0), (0.0, 0.0)), ((1.0, 1.0), (1.0, 0.0)), ((0.0, 0.5), (1.0, 0.5))],
}

_LETTER_BOXES = {
    "L": (0.10, 0.42),
    "A": (0.58, 0.90),
    "U": (0.34, 0.66),
    "G": (0.14, 0.60),
    "H": (0.42, 0.88),
}

_LETTER_SWEEP_SCALE = {"L": 0.4, "A": 0.6, "U": 0.8, "G": 0.5, "H": 0.7}

RESET_LABEL = "C"


@dataclass
class MarchingBandConfig:
    n_entities: int = 64
    letters: str = "LAUGH"
    letter_duration: int = 200
    reset_duration: int = 50
    oob_threshold: int = 11
    escape_prob: float = 0.09    # calibrated by sweep: ~6 resets per 10 default sequences
    noise_scale: float = 0.02
    n_sequences: int = 10
    extra_noise_dims: int = 0
    extra_noise_variance: float = 4e-4
    relax_gain: float = 0.25
    sweep_period: int = 100
    fill_swing: float = 0.25
    margin: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.oob_threshold > self.n_entities:
            raise ValueError("threshold cannot exceed the entity count")
        if self.letter_duration <= 0 or self.reset_duration <= 0:
            raise ValueError("durations must be positive")
        for ch in self.letters:
            if ch not in _LETTER_SEGMENTS:
                raise ValueError(f"no stencil for letter {ch!r}")

    @property
    def n_states(self):
        return len(self.letters) + 1  # letters plus the reset state

    def state_labels(self):
        return list(self.letters) + [RESET_LABEL]


class _Stencil:
    """Arc-length parameterization of one letter's polyline."""

    def __init__(self, letter, margin):
        x_lo, x_hi = _LETTER_BOXES[letter]
        y_lo, y_hi = margin, 1.0 - margin
        pts = []
        for (x0, y0), (x1, y1) in _LETTER_SEGMENTS[letter]:
            a = np.array([x_lo + (x_hi - x_lo) * x0, y_lo + (y_hi - y_lo) * y0])
            b = np.array([x_lo + (x_hi - x_lo) * x1, y_lo + (y_hi - y_lo) * y1])
            pts.append((a, b))
        self.segments = pts
        lens = [float(np.linalg.norm(b - a)) for a, b in pts]
        self.cum = np.concatenate([[0.0], np.cumsum(lens)])
        self.total = float(self.cum[-1])

    def points_at(self, u):
        """Positions at arc parameters ``u`` (clipped to the stencil)."""
        u = np.clip(np.atleast_1d(u), 0.0, self.total)
        idx = np.clip(np.searchsorted(self.cum, u, side="right") - 1, 0, len(self.segments) - 1)
        out = np.empty((u.shape[0], 2))
        for i, (seg_i, ui) in enumerate(zip(idx, u)):
            a, b = self.segments[seg_i]
            seg_len = self.cum[seg_i + 1] - self.cum[seg_i]
            frac = 0.0 if seg_len <= 0 else (ui - self.cum[seg_i]) / seg_len
            out[i] = a + frac * (b - a)
        return out


def _band_targets(config):
    """Per (letter, entity) fill-motion parameters.

    Each entity anchors at the stencil point nearest its assigned
    vertical coordinate and oscillates along the stencil arc around that
    anchor; periods and phases are jittered per (letter, entity) so the
    fill motion carries no globally coherent cycle.
    """
    J = config.n_entities
    m = config.margin
    ys = m + (1.0 - 2.0 * m) * (np.arange(J) + 0.5) / J
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(999,)))
    table = {}
    for letter in sorted(set(config.letters)):
        stencil = _Stencil(letter, m)
        grid = np.linspace(0.0, stencil.total, 512)
        grid_pts = stencil.points_at(grid)
        anchors = np.empty(J)
        for j in range(J):
            cost = np.abs(grid_pts[:, 1] - ys[j])
            # small per-entity tilt spreads ties (e.g. two verticals) across entities
            cost = cost + 1e-3 * np.abs(grid - stencil.total * ((j * 2654435761) % 997) / 997.0)
            anchors[j] = grid[int(np.argmin(cost))]
        base = max(8.0, config.sweep_period * _LETTER_SWEEP_SCALE[letter])
        periods = base * (1.0 + 0.3 * rng.random(J))
        phases = 2.0 * math.pi * rng.random(J)
        swings = config.fill_swing * stencil.total * (0.5 + rng.random(J))
        table[letter] = (stencil, anchors, swings, periods, phases)
    return ys, table


def _generate_sequence(config, rng):
    J = config.n_entities
    ys, table = _band_targets(config)
    center = np.array([0.5, 0.5])

    letters = list(config.letters)
    obs_rows = []
    labels = []

    state = letters[0]
    letter_idx = 0
    letter_elapsed = 0
    reset_elapsed = 0
    escaped = np.zeros(J, dtype=bool)
    escape_target = np.zeros((J, 2))

    stencil, anchors, swings, _, phases = table[state]
    x = stencil.points_at(anchors + swings * np.sin(phases))
    x += config.noise_scale * rng.standard_normal((J, 2))

    max_steps = len(letters) * config.letter_duration * (config.reset_duration + 1) + 10
    t = 0
    while True:
        if t >= max_steps:
            raise RuntimeError("marching band simulation failed to terminate")
        obs_rows.append(x.copy())
        labels.append(state)

        # advance the routine clock; the letter clock counts every
        # letter-labeled step, including one that triggers a reset
        oob = ((x <= 0.0) | (x >= 1.0)).any(axis=1)
        if state == RESET_LABEL:
            reset_elapsed += 1
            if reset_elapsed >= config.reset_duration:
                if letter_elapsed >= config.letter_duration:
                    letter_idx += 1
                    letter_elapsed = 0
                    if letter_idx >= len(letters):
                        break
                state = letters[letter_idx]
        else:
            letter_elapsed += 1
            if int(oob.sum()) >= config.oob_threshold:
                state = RESET_LABEL
                reset_elapsed = 0
                escaped[:] = False
            elif letter_elapsed >= config.letter_duration:
                letter_idx += 1
                letter_elapsed = 0
                if letter_idx >= len(letters):
                    break
                state = letters[letter_idx]
        t += 1

        # move every entity toward its target for the (new) state
        if state == RESET_LABEL:
            target = np.tile(center, (J, 1))
        else:
            stencil, anchors, swings, periods, phases = table[state]
            sweep = np.sin(2.0 * math.pi * letter_elapsed / periods + phases)
            target = stencil.points_at(anchors + swings * sweep)
            target = np.where(escaped[:, None], escape_target, target)

        x = x + config.relax_gain * (target - x) + config.noise_scale * rng.standard_normal((J, 2))

        if state != RESET_LABEL:
            for j in range(J):
                if escaped[j]:
                    continue
                out_low = x[j] <= 0.0
                out_high = x[j] >= 1.0
                if out_low.any() or out_high.any():
                    if rng.random() < config.escape_prob:
                        escaped[j] = True
                        direction = np.where(out_high, 1.0, np.where(out_low, -1.0, 0.0))
                        escape_target[j] = np.clip(x[j], 0.0, 1.0) + 0.08 * direction
                    else:
                        x[j] = np.where(out_low, -x[j], x[j])
                        x[j] = np.where(out_high, 2.0 - x[j], x[j])
                        x[j] = np.clip(x[j], 1e-6, 1.0 - 1e-6)
        else:
            escaped[:] = False

    obs = np.stack(obs_rows)
    label_index = {ch: i for i, ch in enumerate(config.state_labels())}
    sys_states = np.array([label_index[c] for c in labels], dtype=np.int64)
    return obs, sys_states


def generate_marching_band(config=None):
    """Simulate the letter-formation benchmark.

    Returns a list of (dataset, latents) pairs, one per sequence; only
    the system-level labels are meaningful (the generating process has
    no per-entity discrete state, so entity labels are zeros).
    """
    config = config or MarchingBandConfig()
    out = []
    for i in range(config.n_sequences):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(i,)))
        obs, sys_states = _generate_sequence(config, rng)
        if config.extra_noise_dims:
            extra = math.sqrt(config.extra_noise_variance) * rng.standard_normal(
                (obs.shape[0], obs.shape[1], config.extra_noise_dims))
            obs = np.concatenate([obs, extra], axis=2)
        data = TimeSeriesDataset(observations=obs, example_end_times=np.array([obs.shape[0]]))
        latents = LatentTrajectories(
            system_states=sys_states,
            entity_states=np.zeros((obs.shape[0], config.n_entities), dtype=np.int64),
        )
        out.append((data, latents))
    return out


def stack_sequences(pairs):
    """Stack per-sequence datasets into one multi-example dataset."""
    obs = np.concatenate([d.observations for d, _ in pairs], axis=0)
    ends = np.cumsum([d.n_timesteps for d, _ in pairs])
    sys_states = np.concatenate([l.system_states for _, l in pairs])
    ent_states = np.concatenate([l.entity_states for _, l in pairs], axis=0)
    data = TimeSeriesDataset(observations=obs, example_end_times=ends)
    return data, LatentTrajectories(system_states=sys_states, entity_states=ent_states)
