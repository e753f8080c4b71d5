"""Federated estimation of treatment effects and survival quantities.

Submodules: ``dgp`` (simulated multi-site data), ``linear`` and ``survival``
(site-level estimators), ``aggregation`` (combining site summaries),
``runtime`` (simulated network and protocols), ``theory`` (asymptotic
predictions), ``mc`` (Monte Carlo harness) and ``cli``.
"""
from . import aggregation, dgp, linear, mc, runtime, survival, theory
from .access import AccessTracker, server_scope, site_scope
from .aggregation import InverseVariance, RandomEffects, SampleSize
from .dgp import CauseSpec, Hazard, LinearDgpSpec, SurvivalDgpSpec, true_estimands
from .errors import ConfigError, FedCIError
from .kernels import BACKEND
from .linear import local_ate
from .mc import McConfig, check_theorems, run_mc
from .runtime import Network, ProtocolConfig
from .survival import aalen_johansen, fit_cox, kaplan_meier

__version__ = "0.1.0"

__all__ = [
    "aggregation",
    "dgp",
    "linear",
    "mc",
    "runtime",
    "survival",
    "theory",
    "AccessTracker",
    "server_scope",
    "site_scope",
    "InverseVariance",
    "RandomEffects",
    "SampleSize",
    "CauseSpec",
    "Hazard",
    "LinearDgpSpec",
    "SurvivalDgpSpec",
    "true_estimands",
    "ConfigError",
    "FedCIError",
    "BACKEND",
    "local_ate",
    "McConfig",
    "check_theorems",
    "run_mc",
    "Network",
    "ProtocolConfig",
    "aalen_johansen",
    "fit_cox",
    "kaplan_meier",
]
