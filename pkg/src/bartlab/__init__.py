"""Bayesian workflow tools for the balloon analogue risk task: prior
predictive checks with and without the task's popping mechanics, adaptive
Metropolis fits of pooled and hierarchical models, and model comparison by
bridge sampling and PSIS-LOO."""

__version__ = "0.1.0"

from .compare import (BridgeResult, GpdFit, LooResult, bayes_factor, bridge_sample, fit_gpd,
                      pointwise_loglik, prior_width_sweep, psis_loo)
from .data import Dataset, load_csv, permute_conditions, save_csv, synth_george
from .diagnostics import bulk_ess, split_rhat
from .infer import PosteriorSamples, SamplerConfig, fit, parameter_recovery, sbc
from .model import (FlatModel, HierModel, HyperParams, Outcome, PriorSpec, SubjectParams,
                    TrialRecord, omega, theta, trial_loglik)
from .simulate import (DesignMode, SimConfig, prior_predictive_flat, prior_predictive_hier,
                       simulate_trial, tail_sensitivity_sweep)
