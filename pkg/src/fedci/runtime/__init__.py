"""Simulated federated network and the protocols that run on it."""
from .audit import AuditVerdict, audit_communication, expected_rounds
from .network import Network, RoundLog, RoundRecord, SiteContext, payload_size
from .objectives import CoxObjective, LeastSquares, ProtocolConfig, check_gradient
from .protocols import (
    FedResult,
    fed_cif,
    fed_cif_riskset,
    fed_cox,
    one_shot_ate,
    run_decomposition,
    run_fedprox,
    run_gd,
    run_meta,
    run_p2p,
    run_personalized,
)
from .topology import Topology, metropolis_weights

__all__ = [
    "AuditVerdict",
    "audit_communication",
    "expected_rounds",
    "Network",
    "RoundLog",
    "RoundRecord",
    "SiteContext",
    "payload_size",
    "CoxObjective",
    "LeastSquares",
    "ProtocolConfig",
    "check_gradient",
    "FedResult",
    "fed_cif",
    "fed_cif_riskset",
    "fed_cox",
    "one_shot_ate",
    "run_decomposition",
    "run_fedprox",
    "run_gd",
    "run_meta",
    "run_p2p",
    "run_personalized",
    "Topology",
    "metropolis_weights",
]
