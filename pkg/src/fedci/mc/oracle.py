"""Large-sample site oracles and the theory predictions built from them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..aggregation import _dl_tau2
from ..dgp import LinearDgpSpec, SurvivalDgpSpec, gen_linear_site, replicate_seed, true_estimands
from ..dgp import _gen_survival
from ..linear import local_ate
from ..survival import aalen_johansen, fit_cox
from ..theory import aj_asymptotics, cox_asymptotics, v_infinity_linear

__all__ = ["SiteBias", "estimate_site_bias", "aj_target", "linear_predictions", "cox_predictions", "aj_predictions"]


@dataclass
class SiteBias:
    """Mean difference between a site estimator and the global target.

    ``info`` (Cox) is the mean per-observation information; ``V`` (CIF) the
    mean per-observation variance ``n Var F_k(t)``.
    """

    value: np.ndarray
    se: np.ndarray
    reps: int
    info: np.ndarray | None = None
    V: np.ndarray | None = None


def _resized(spec, k, n):
    data = spec.to_dict()
    sizes = list(data["site_sizes"])
    sizes[k] = int(n)
    data["site_sizes"] = sizes
    return type(spec).from_dict(data)


def aj_target(spec: SurvivalDgpSpec, grid, target="mixture", cause=1, oracle_n=10**6, seed=0):
    """CIF target on ``grid``: the ``rho``-mixture, site 0 (``"reference"``) or a given array."""
    if not isinstance(target, str):
        return np.asarray(target, dtype=float)
    truth = true_estimands(spec, grid, oracle_n=oracle_n, seed=seed)
    if target == "mixture":
        return truth.cif[cause - 1]
    if target == "reference":
        return truth.site_cif[0, cause - 1]
    raise ValueError(f"unknown CIF target {target!r}")


def estimate_site_bias(spec, k, oracle_n=100_000, target=None, reps=20, seed=0, grid=None, cause=1) -> SiteBias:
    """Fit site ``k``'s estimator on ``reps`` samples of size ``oracle_n`` and compare with the target.

    Linear: local ATE vs the mixture ATE (default). Single-cause survival:
    local Cox coefficients vs ``spec.beta`` (default). Competing risks:
    the Aalen-Johansen CIF of ``cause`` on ``grid`` vs :func:`aj_target`.
    """
    big = _resized(spec, k, oracle_n)
    seeds = [replicate_seed(seed, 10**6 + r) for r in range(reps)]
    if isinstance(spec, LinearDgpSpec):
        tgt = true_estimands(spec).tau if target is None else float(target)
        vals = np.array([[local_ate(gen_linear_site(big, k, s)).value] for s in seeds])
        diff = vals - tgt
        return SiteBias(diff.mean(axis=0), diff.std(axis=0, ddof=1) / np.sqrt(reps), reps)
    if not isinstance(spec, SurvivalDgpSpec):
        raise TypeError(f"unsupported spec type {type(spec).__name__}")
    if spec.J == 1 and grid is None:
        tgt = spec.beta if target is None else np.asarray(target, dtype=float)
        fits = [fit_cox(_gen_survival(big, k, s)) for s in seeds]
        diff = np.array([f.beta for f in fits]) - tgt
        info = np.mean([f.info for f in fits], axis=0)
        return SiteBias(diff.mean(axis=0), diff.std(axis=0, ddof=1) / np.sqrt(reps), reps, info=info)
    if grid is None:
        raise ValueError("CIF site bias needs a grid")
    grid = np.asarray(grid, dtype=float)
    tgt = aj_target(spec, grid, "mixture" if target is None else target, cause, seed=seed)
    curves = [aalen_johansen(_gen_survival(big, k, s), cause).curve for s in seeds]
    F = np.array([c(grid) for c in curves])
    V = np.mean([oracle_n * c.variance_at(grid) for c in curves], axis=0)
    diff = F - tgt
    return SiteBias(diff.mean(axis=0), diff.std(axis=0, ddof=1) / np.sqrt(reps), reps, V=V)


# --------------------------------------------------------------------------
# predictions attached to reports


LINEAR_PREDICTION_KIND = {
    "pool": "pool",
    "gd": "gd",
    "one_shot_ivw": "one_shot_ivw",
    "one_shot_sw": "one_shot_sw",
    "meta_sw": "meta_sw",
    "meta_ivw": "meta_ivw",
}


def linear_predictions(spec: LinearDgpSpec, estimators):
    out = {}
    for name in estimators:
        if name in LINEAR_PREDICTION_KIND:
            out[name] = v_infinity_linear(LINEAR_PREDICTION_KIND[name], spec)
        elif name == "local0":
            p = v_infinity_linear("local", spec)
            out[name] = type(p)("local", float(p.bias[0]), float(p.variance[0]), note="site 0")
    if "one_shot_sw" in estimators:
        out["one_shot_sw_derived"] = v_infinity_linear("one_shot_sw_derived", spec)
    return out


def cox_predictions(spec: SurvivalDgpSpec, estimators, biases):
    """Predictions from per-site oracles ``biases`` (list of :class:`SiteBias`)."""
    rho = spec.rho
    deltas = np.array([b.value for b in biases])
    delta_se = np.array([b.se for b in biases])
    H = np.array([np.atleast_2d(b.info) for b in biases])
    n = spec.n
    n_k = rho * n
    site_var = np.array([np.diag(np.linalg.inv(n_k[k] * H[k])) for k in range(spec.K)])
    ivw = (1.0 / site_var) / np.sum(1.0 / site_var, axis=0)
    out = {}
    for name in estimators:
        if name in ("pooled", "fedprox", "fedavg"):
            out[name] = cox_asymptotics(name, deltas, H, rho, n)
        elif name in ("meta_fixed", "meta_random"):
            # tau^2 -> 0 when the coefficients are shared, so both use inverse-variance weights
            out[name] = cox_asymptotics(name, deltas, H, rho, n, weights=ivw)
        elif name == "fed_ivw":
            total = np.einsum("k,kij->ij", n_k, H)
            inv = np.linalg.inv(total)
            bias = inv @ np.einsum("k,kij,kj->i", n_k, H, deltas)
            pred = cox_asymptotics("pooled", deltas, H, rho, n)
            out[name] = type(pred)("fed_ivw", bias, inv, note="information-weighted")
    out["_site"] = {"delta": deltas, "delta_se": delta_se, "rho": rho}
    return out


def aj_predictions(spec: SurvivalDgpSpec, estimators, grid, b, b_se, V):
    """Predictions from site biases ``b`` (K, G) and per-observation variances ``V`` (K, G)."""
    rho = spec.rho
    n = spec.n
    n_k = rho * n
    ivw = (n_k[:, None] / V) / np.sum(n_k[:, None] / V, axis=0)
    F = b  # tau^2 depends only on differences between sites, so b stands in for F_k
    tau2 = np.array([_dl_tau2(F[:, i], V[:, i] / n_k) if np.all(V[:, i] > 0) else 0.0 for i in range(F.shape[1])])
    re = 1.0 / (V / n_k[:, None] + tau2)
    re = re / re.sum(axis=0)
    out = {}
    for name in estimators:
        if name in ("pooled", "riskset"):
            out[name] = aj_asymptotics("pooled", b, V, rho, n)
        elif name == "fedavg":
            out[name] = aj_asymptotics("fedavg", b, V, rho, n)
        elif name == "meta_ivw":
            out[name] = aj_asymptotics("meta_fixed", b, V, rho, n, weights=ivw)
        elif name == "meta_random":
            out[name] = aj_asymptotics("meta_random", b, V, rho, n, weights=re)
    out["_site"] = {"b": b, "b_se": b_se, "rho": rho, "grid": np.asarray(grid, dtype=float)}
    return out
