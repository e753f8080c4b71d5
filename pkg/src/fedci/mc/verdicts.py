"""Pass/fail checks of the theoretical claims against a Monte Carlo report."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Tolerances", "Verdict", "check_theorems", "default_claims"]

VARIANCE_CHAIN = ("pool", "gd", "one_shot_ivw", "meta_ivw", "meta_sw")


@dataclass(frozen=True)
class Tolerances:
    exact_abs: float = 1e-8  # one-shot IVW vs pooled, per replicate
    order_slack_se: float = 2.0  # variance orderings
    equal_se: float = 2.0  # "approximately equal" variances
    bias_gate_se: float = 3.0  # unbiasedness / biasedness gates
    match_se: float = 2.0  # empirical bias vs predicted bias
    variance_rel: float = 0.10  # empirical vs predicted variance


FLOAT_REL = 1e-9  # relative floor below which a variance gap is floating-point noise


@dataclass
class Verdict:
    claim: str
    passed: bool
    margin: float
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.claim}: {self.detail}"


def _has(report, *names):
    return all(n in report.samples for n in names)


def _shifted(report):
    """Site ATEs differ, so inverse-variance weighting can move the target."""
    spec = report.spec
    if "theta1" not in spec:
        return False
    diff = np.asarray(spec["theta1"]) - np.asarray(spec["theta0"])
    tau = diff[0] + np.asarray(spec["covariate_means"]) @ diff[1:]
    return bool(np.ptp(tau) > 1e-12)


def default_claims(report):
    if report.family == "linear":
        # the variance chain assumes a common effect; under shift the claim is about bias
        if _shifted(report):
            return ["one_shot_identity", "covariate_shift"]
        return ["one_shot_identity", "variance_ordering"]
    if report.family == "cox":
        return ["cox_table"]
    return ["cif_table"]


def check_theorems(report, predictions=None, tolerances=Tolerances(), claims=None):
    """Evaluate the requested claims; claims whose estimators are missing are skipped.

    ``predictions`` defaults to the report's own. Claims: ``one_shot_identity``
    (one-shot IVW equals pooled per replicate), ``variance_ordering``,
    ``strict_gap``, ``variance_prediction``, ``covariate_shift``, ``cox_table`` and
    ``cif_table``.
    """
    preds = report.predictions if predictions is None else predictions
    tol = tolerances
    out = []
    for claim in claims if claims is not None else default_claims(report):
        fn = _CLAIMS[claim]
        out.extend(fn(report, preds, tol))
    return out


def _one_shot_identity(report, preds, tol):
    if not _has(report, "pool", "one_shot_ivw"):
        return []
    a = report.samples["one_shot_ivw"][:, 0]
    b = report.samples["pool"][:, 0]
    keep = ~(np.isnan(a) | np.isnan(b))
    worst = float(np.max(np.abs(a[keep] - b[keep]))) if keep.any() else float("inf")
    return [Verdict("one_shot_ivw equals pool", worst < tol.exact_abs, tol.exact_abs - worst, f"max |diff| = {worst:.3g} over {int(keep.sum())} replicates")]


def _variance_ordering(report, preds, tol):
    chain = [n for n in VARIANCE_CHAIN if n in report.samples]
    out = []
    equal = [n for n in ("pool", "gd", "one_shot_ivw") if n in chain]
    for i in range(len(equal)):
        for j in range(i + 1, len(equal)):
            gap, se = report.paired_variance_gap(equal[i], equal[j])
            # estimators that agree to rounding have a gap (and se) of rounding size
            allowed = tol.equal_se * se + FLOAT_REL * report.metric(equal[i], "variance")[0]
            out.append(Verdict(f"Var({equal[i]}) ~ Var({equal[j]})", abs(gap) <= allowed, allowed - abs(gap), f"gap {gap:.4g}, paired se {se:.3g}"))
    steps = []
    if equal and "meta_ivw" in chain:
        steps.append((equal[0], "meta_ivw"))
    if "meta_ivw" in chain and "meta_sw" in chain:
        steps.append(("meta_ivw", "meta_sw"))
    elif equal and "meta_sw" in chain:
        steps.append((equal[0], "meta_sw"))
    for lo, hi in steps:
        gap, se = report.paired_variance_gap(hi, lo)
        out.append(Verdict(f"Var({lo}) <= Var({hi})", gap >= -tol.order_slack_se * se, gap + tol.order_slack_se * se, f"gap {gap:.4g}, paired se {se:.3g}"))
    return out


def _strict_gap(report, preds, tol):
    """Strong heterogeneity: the meta-analysis variances exceed the pooled one by more than noise."""
    base = next((n for n in ("pool", "gd", "one_shot_ivw") if n in report.samples), None)
    out = []
    for hi in ("meta_ivw", "meta_sw"):
        if base is None or hi not in report.samples:
            continue
        gap, se = report.paired_variance_gap(hi, base)
        z = gap / se if se > 0 else 0.0
        out.append(Verdict(f"Var({base}) < Var({hi}) strictly", z > tol.bias_gate_se, z - tol.bias_gate_se, f"gap {gap:.4g}, {z:.2f} paired SE"))
    return out


def _variance_prediction(report, preds, tol):
    out = []
    for name in VARIANCE_CHAIN:
        if name not in report.samples or name not in preds:
            continue
        v, _ = report.metric(name, "variance")
        pv = float(np.asarray(preds[name].variance))
        rel = abs(v - pv) / pv
        out.append(Verdict(f"Var({name}) matches prediction", rel <= tol.variance_rel, tol.variance_rel - rel, f"empirical {v:.4g}, predicted {pv:.4g}, rel err {rel:.3f}"))
    return out


def _covariate_shift(report, preds, tol):
    out = []
    if "meta_ivw" in report.samples:
        b, se = report.metric("meta_ivw", "bias")
        z = abs(b) / se
        out.append(Verdict("meta_ivw biased", z > tol.bias_gate_se, z - tol.bias_gate_se, f"bias {b:.4g}, {z:.2f} MC-SE"))
    for name in ("pool", "gd", "one_shot_ivw"):
        if name in report.samples:
            b, se = report.metric(name, "bias")
            z = abs(b) / se
            out.append(Verdict(f"{name} unbiased", z < tol.bias_gate_se, tol.bias_gate_se - z, f"bias {b:.4g}, {z:.2f} MC-SE"))
    return out


def _cox_table(report, preds, tol):
    out = []
    m = report.truth.size
    site = preds.get("_site")
    for c in range(m):
        lab = report.components[c]
        if "fedprox" in report.samples:
            b, se = report.metric("fedprox", "bias", c)
            z = abs(b) / se
            out.append(Verdict(f"fedprox unbiased [{lab}]", z < tol.bias_gate_se, tol.bias_gate_se - z, f"bias {b:.4g}, {z:.2f} MC-SE"))
        if "fedavg" in report.samples and site is not None:
            b, se = report.metric("fedavg", "bias", c)
            pb = float(site["rho"] @ site["delta"][:, c])
            pse = float(np.sqrt(se**2 + np.sum((site["rho"] * site["delta_se"][:, c]) ** 2)))
            z = abs(b - pb) / pse
            out.append(Verdict(f"fedavg bias matches sum rho_k delta_k [{lab}]", z <= tol.match_se, tol.match_se - z, f"empirical {b:.4g}, predicted {pb:.4g}, {z:.2f} SE"))
        if "fedprox" in report.samples:
            for other in ("fedavg", "meta_fixed", "meta_random"):
                if other in report.samples:
                    gap, se = report.paired_variance_gap(other, "fedprox", c)
                    out.append(Verdict(f"Var(fedprox) <= Var({other}) [{lab}]", gap >= -tol.order_slack_se * se, gap + tol.order_slack_se * se, f"gap {gap:.4g}, paired se {se:.3g}"))
    return out


def _cif_table(report, preds, tol):
    out = []
    site = preds.get("_site")
    for c in range(report.truth.size):
        lab = report.components[c]
        # pooled estimators target the rho-mixture; offset is zero when that is the target
        offset, offset_se = 0.0, 0.0
        if site is not None:
            offset = float(site["rho"] @ site["b"][:, c])
            offset_se = float(np.sqrt(np.sum((site["rho"] * site["b_se"][:, c]) ** 2)))
        for name in ("pooled", "riskset"):
            if name in report.samples:
                b, se = report.metric(name, "bias", c)
                tot = float(np.sqrt(se**2 + offset_se**2))
                z = abs(b - offset) / tot if tot > 0 else 0.0
                out.append(Verdict(f"{name} unbiased for the mixture [{lab}]", z < tol.bias_gate_se, tol.bias_gate_se - z, f"bias {b:.4g}, mixture offset {offset:.4g}, {z:.2f} MC-SE"))
        if "fedavg" in report.samples and site is not None:
            b, se = report.metric("fedavg", "bias", c)
            pb = float(site["rho"] @ site["b"][:, c])
            pse = float(np.sqrt(se**2 + np.sum((site["rho"] * site["b_se"][:, c]) ** 2)))
            z = abs(b - pb) / pse
            out.append(Verdict(f"fedavg bias matches sum rho_k b_k [{lab}]", z <= tol.match_se, tol.match_se - z, f"empirical {b:.4g}, predicted {pb:.4g}, {z:.2f} SE"))
    return out


_CLAIMS = {
    "one_shot_identity": _one_shot_identity,
    "variance_ordering": _variance_ordering,
    "strict_gap": _strict_gap,
    "variance_prediction": _variance_prediction,
    "covariate_shift": _covariate_shift,
    "cox_table": _cox_table,
    "cif_table": _cif_table,
}
