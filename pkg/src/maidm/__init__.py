"""Bayesian calibration of car-following behavior with GP residual memory.

Calibrates IDM parameters from leader-follower episodes under iid or
GP-correlated acceleration noise (pooled, hierarchical, or unpooled across
drivers), and runs deterministic/stochastic single-pair and ring-road
simulations with probabilistic scoring.
"""

from .episodes import Episode, LeaderTrack, SynthSpec, extract_episodes, load_episode_csv, resample, save_episode_csv, synth_generate
from .gp import CovMatrix, KernelHyper, NoiseScale, assemble_speed_cov, gram, mvn_logpdf, sample_gp_path, se_kernel, whiten_residuals
from .idm import CfInput, IdmParams, KinematicState, Rollout, desired_gap, equilibrium_gap, idm_acceleration, rollout_deterministic, step
from .mcmc import Diagnostics, PosteriorSamples, SamplerConfig, rhat, ess, run_chains, summarize
from .model import LogPosterior, ModelSpec, ParamLayout, PriorConfig, log_posterior, log_prior, loglik_bidm, loglik_maidm
from .scoring import ScoreReport, crps_empirical, crps_series, residual_autocorr, rmse_ensemble, score_simulation
from .simulate import (
    ParameterSets,
    RingConfig,
    RingOutput,
    SimConfig,
    SimOutput,
    fundamental_diagram,
    ring_simulate,
    sample_parameter_sets,
    simulate_deterministic,
    simulate_stochastic_bidm,
    simulate_stochastic_maidm,
)

__version__ = "0.1.0"
