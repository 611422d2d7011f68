"""Hierarchical switching recurrent dynamical models.

Two-level discrete latent chains (a shared system chain on top of
per-entity chains) with recurrent feedback from observations and
autoregressive emissions.  Provides generative simulation, structured
variational inference with cost linear in the number of entities,
partial forecasting, synthetic benchmarks, and evaluation metrics.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .chain import ChainPosterior, ChainSpec, chain_entropy, filter, sample_chain, smooth, viterbi
from .cluster import kmeans, munkres_align
from .datasets import (FigureEightConfig, MarchingBandConfig, generate_figure_eight,
                       generate_marching_band, stack_sequences)
from .emissions import (GaussianInitParams, GaussianVarParams, VonMisesArParams,
                        VonMisesInitParams, emission_conditional_mean, emission_log_density,
                        emission_sample, fit_gaussian_var_weighted, fit_von_mises_ar_weighted)
from .forecast import ForecastRequest, decode_states, partial_forecast, posterior_mean_fit
from .inference import (CaviConfig, VariationalPosterior, compute_elbo, fit_arhmm_em,
                        m_step, run_cavi, smart_initialize, ves_step, vez_step)
from .io import (ExperimentConfig, load_checkpoint, load_config, load_dataset,
                 save_checkpoint, save_config, save_dataset)
from .metrics import (ForecastSummary, directional_variation, forecast_mse,
                      mean_forecast_error, pct_in_bounds, segmentation_accuracy,
                      summarize_forecast_errors)
from .model import (InitParams, LatentTrajectories, ModelParams, TimeSeriesDataset,
                    complete_data_log_prob, sample_model)
from .simplex import StickyDirichletPrior, log_softmax, sticky_dirichlet_log_density
from .transitions import (EntityTransitionParams, RecurrenceSpec, SystemTransitionParams,
                          entity_transition_log_probs, evaluate_recurrence,
                          system_transition_log_probs)

__version__ = "0.1.0"
