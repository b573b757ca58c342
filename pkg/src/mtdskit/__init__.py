"""Multi-task dynamical systems: a latent code per sequence drives the
parameters of a shared base model through a constrained affine generator.

Modules: :mod:`core` (types), :mod:`models` (base models), :mod:`gradients`,
:mod:`learning` (variational training), :mod:`adais` (filtered inference and
forecasting), :mod:`kalman`, :mod:`baselines` (comparators and evaluation),
:mod:`data`, :mod:`config`, :mod:`artifact` and :mod:`cli`.
"""

from .adais import (
    AdaIsConfig,
    GaussianMixture,
    adais_fit,
    ess,
    naive_smc_reweight,
    posterior_predictive,
    sequential_filter,
    weighted_em,
)
from .core import (
    ConstraintSpec,
    ParamGenerator,
    SequenceDataset,
    SequenceRecord,
    VariationalPosterior,
    apply_param_generator,
)
from .gradients import finite_diff_check, loglik_and_grad
from .kalman import StochasticLds, kalman_filter, steady_state, to_deterministic_lds
from .learning import TrainConfig, adam_step, elbo_estimate, log_marginal_is_estimate, train
from .models import LdsSpec, MtRnnSpec, PdSpec, make_model

__version__ = "0.1.0"

__all__ = [
    "AdaIsConfig",
    "ConstraintSpec",
    "GaussianMixture",
    "LdsSpec",
    "MtRnnSpec",
    "ParamGenerator",
    "PdSpec",
    "SequenceDataset",
    "SequenceRecord",
    "StochasticLds",
    "TrainConfig",
    "VariationalPosterior",
    "adais_fit",
    "adam_step",
    "apply_param_generator",
    "elbo_estimate",
    "ess",
    "finite_diff_check",
    "kalman_filter",
    "log_marginal_is_estimate",
    "loglik_and_grad",
    "make_model",
    "naive_smc_reweight",
    "posterior_predictive",
    "sequential_filter",
    "steady_state",
    "to_deterministic_lds",
    "train",
    "weighted_em",
]
