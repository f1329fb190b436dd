"""Bayesian state-space inference for a five-pool forest carbon model."""
from .model import (FLUXES, PARAM_LOWER, PARAM_NAMES, PARAM_UPPER, SIM_PARAMS, STOCKS, ConfigError,
                    Drivers, ParameterVector, compute_fluxes, read_drivers, synthetic_drivers)
from .ndlm import AffineTransition, LatentGrid, compose_transition, coarsen
from .likelihood import ObservationSet, StateSpaceProblem, clone, log_likelihood
from .sampler import ChainOutput, MCMCConfig, PriorSpec, run_mcmc
from .synth import Scenario, generate_study, make_dataset
from .initialization import InitStrategy, initialize
from .diagnostics import classify, coverage, ess, gelman_rubin, hpd

__version__ = "0.1.0"
