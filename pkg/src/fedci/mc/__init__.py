"""Monte Carlo harness, site-bias oracles and theorem checks."""
from .estimators import AJ_ESTIMATORS, COX_ESTIMATORS, LINEAR_ESTIMATORS, default_estimators, family_of, known_estimators
from .harness import SCHEMA_VERSION, EmpiricalReport, McConfig, run_mc
from .oracle import SiteBias, aj_target, estimate_site_bias
from .verdicts import Tolerances, Verdict, check_theorems, default_claims

__all__ = [
    "AJ_ESTIMATORS",
    "COX_ESTIMATORS",
    "LINEAR_ESTIMATORS",
    "default_estimators",
    "family_of",
    "known_estimators",
    "SCHEMA_VERSION",
    "EmpiricalReport",
    "McConfig",
    "run_mc",
    "SiteBias",
    "aj_target",
    "estimate_site_bias",
    "Tolerances",
    "Verdict",
    "check_theorems",
    "default_claims",
]
