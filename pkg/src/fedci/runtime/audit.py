"""Check recorded payloads against each protocol's declared communication cost."""
from __future__ import annotations

from dataclasses import dataclass, field

from .network import RoundLog

__all__ = ["AuditVerdict", "expected_rounds", "audit_communication"]


@dataclass
class AuditVerdict:
    passed: bool
    protocol: str
    first_bad_round: int | None = None
    diff: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def expected_rounds(protocol, d, T=None, K=1, param_dim=None, auto_step=False, degrees=None, shared_dim=None):
    """Per-round ``(up, down, p2p)`` scalars per site for a protocol.

    ``param_dim`` defaults to ``2(d+1)``: one intercept-augmented linear
    model per treatment arm.
    """
    p = d + 1
    P = 2 * p if param_dim is None else param_dim
    if protocol == "meta":
        return [((2,) * K, (0,) * K, (0,) * K)]
    if protocol == "one_shot_sw":
        return [((2 * p,) * K, (0,) * K, (0,) * K), ((1,) * K, (2 * p,) * K, (0,) * K)]
    if protocol == "one_shot_ivw":
        return [((2 * (p * p + p),) * K, (0,) * K, (0,) * K), ((1,) * K, (2 * p,) * K, (0,) * K)]
    if T is None:
        raise ValueError(f"{protocol} needs T")
    if protocol in ("gd", "fedprox"):
        rounds = [((P,) * K, (P,) * K, (0,) * K) for _ in range(T)]
        if protocol == "gd" and auto_step:
            rounds[0] = ((P + 1,) * K, (P,) * K, (0,) * K)
        return rounds + [((1,) * K, (P,) * K, (0,) * K)]
    if protocol == "personalized":
        return [((P,) * K, (P,) * K, (0,) * K) for _ in range(T)] + [((0,) * K, (P,) * K, (0,) * K)]
    if protocol == "p2p":
        if degrees is None:
            raise ValueError("p2p audit needs node degrees")
        return [((0,) * K, (0,) * K, tuple(P * g for g in degrees)) for _ in range(T)]
    if protocol == "decomposition":
        r = d if shared_dim is None else shared_dim
        return [((d * r,) * K, (d * r,) * K, (0,) * K) for _ in range(T)]
    raise ValueError(f"unknown protocol {protocol!r}")


def audit_communication(log: RoundLog, protocol, d, T=None, **kwargs) -> AuditVerdict:
    """Compare ``log`` with :func:`expected_rounds`; the verdict names the first mismatch.

    For ``gd`` the automatic step size is detected from ``log.meta``.
    """
    K = len(log.site_ids)
    if protocol == "gd":
        kwargs.setdefault("auto_step", bool(log.meta.get("curvature_in_round_1")))
    expected = expected_rounds(protocol, d, T, K=K, **kwargs)
    diff = []
    if len(expected) != log.total_rounds:
        diff.append({"round": None, "field": "rounds", "expected": len(expected), "recorded": log.total_rounds})
    for i, (rec, exp) in enumerate(zip(log.rounds, expected), start=1):
        for name, got, want in zip(("up", "down", "p2p"), (rec.up, rec.down, rec.p2p), exp):
            if tuple(got) != tuple(want):
                diff.append({"round": i, "field": name, "expected": list(want), "recorded": list(got)})
    first = next((x["round"] for x in diff if x["round"] is not None), None)
    if first is None and diff:
        first = min(len(expected), log.total_rounds) + 1
    return AuditVerdict(not diff, protocol, first, diff)
