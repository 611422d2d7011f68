"""Forecast and segmentation metrics."""

import math
from dataclasses import dataclass

import numpy as np

from .cluster import munkres_align
from .errors import NoDisplacement


def forecast_mse(forecast, truth):
    """Mean over timesteps and dimensions of the squared error."""
    f = np.asarray(forecast, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if f.shape != t.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {t.shape}")
    return float(((f - t) ** 2).mean())


def mean_forecast_error(forecast, truth):
    """Mean over the window of the per-timestep Euclidean distance."""
    f = np.asarray(forecast, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if f.shape != t.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {t.shape}")
    return float(np.sqrt(((f - t) ** 2).sum(axis=-1)).mean())


@dataclass
class ForecastSummary:
    """Best / best-trial-average / median-over-trials error summary."""

    best_mse: float
    trial_avg_mse_of_best_trial: float
    trial_avg_stderr: float
    median_over_trials_of_avg_mse: float

    def as_dict(self):
        return {
            "best_mse": self.best_mse,
            "trial_avg_mse_of_best_trial": self.trial_avg_mse_of_best_trial,
            "trial_avg_stderr": self.trial_avg_stderr,
            "median_over_trials_of_avg_mse": self.median_over_trials_of_avg_mse,
        }


def summarize_forecast_errors(per_trial_sample_mse):
    """Summary statistics over trials x samples of MSE values.

    * ``best_mse``: minimum over every (trial, sample),
    * average (with standard error) over the samples of the trial that
      produced the best sample,
    * median over trials of the per-trial sample average.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in per_trial_sample_mse]
    if not rows or any(r.size == 0 for r in rows):
        raise ValueError("every trial needs at least one sample")
    best_trial = min(range(len(rows)), key=lambda i: rows[i].min())
    best = rows[best_trial]
    stderr = float(best.std(ddof=1) / math.sqrt(best.size)) if best.size > 1 else 0.0
    return ForecastSummary(
        best_mse=float(min(r.min() for r in rows)),
        trial_avg_mse_of_best_trial=float(best.mean()),
        trial_avg_stderr=stderr,
        median_over_trials_of_avg_mse=float(np.median([r.mean() for r in rows])),
    )


def segmentation_accuracy(predicted, truth, n_states):
    """Aligned classification accuracy of a discrete segmentation.

    Builds the confusion matrix, finds the label permutation maximizing
    its trace, and returns (accuracy, permutation) where
    ``permutation[p]`` is the true label matched to predicted label p.
    """
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("label sequences differ in length")
    if pred.min() < 0 or pred.max() >= n_states or true.min() < 0 or true.max() >= n_states:
        raise ValueError("label out of range")
    confusion = np.zeros((n_states, n_states))
    np.add.at(confusion, (true, pred), 1.0)
    perm = munkres_align(confusion)
    accuracy = float((perm[pred] == true).mean())
    return accuracy, perm


def directional_variation(forecasts):
    """Circular variance of movement directions across entities.

    Each entity contributes the angle of its displacement between the
    first and last timestep of the window; the statistic is one minus
    the mean resultant length.  Entities with zero displacement are
    excluded.
    """
    f = np.asarray(forecasts, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2 or f.shape[1] < 2:
        raise ValueError("expected [entities, timesteps >= 2, 2]")
    disp = f[:, -1, :] - f[:, 0, :]
    norms = np.sqrt((disp**2).sum(axis=1))
    keep = norms > 0.0
    if not keep.any():
        raise NoDisplacement("every entity has zero displacement")
    angles = np.arctan2(disp[keep, 1], disp[keep, 0])
    resultant = math.hypot(float(np.cos(angles).mean()), float(np.sin(angles).mean()))
    return 1.0 - resultant


def pct_in_bounds(forecasts, bounds):
    """Fraction of forecast points with every coordinate inside the box."""
    f = np.asarray(forecasts, dtype=np.float64)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    inside = ((f >= lo) & (f <= hi)).all(axis=-1)
    return float(inside.mean())
