"""Closed-form asymptotic bias and variance of the federated estimators.

All variances are on the scale of the final estimator (what a Monte Carlo
variance estimates), unless ``normalization="as_printed"`` is requested
for the survival tables.

Linear rows use ``|v|^2_S = v' S v`` with ``S = sum_k rho_k Sigma_k`` (the
within-site covariate covariance) for the pooled-type estimators, since
site sizes are fixed by design.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgp import LinearDgpSpec
from .errors import SingularInformation

__all__ = [
    "AsymptoticPrediction",
    "LINEAR_KINDS",
    "COX_KINDS",
    "AJ_KINDS",
    "v_infinity_linear",
    "linear_site_variances",
    "cox_asymptotics",
    "aj_asymptotics",
]

LINEAR_KINDS = ("local", "meta_sw", "meta_ivw", "one_shot_sw", "one_shot_sw_derived", "one_shot_ivw", "gd", "pool")
COX_KINDS = ("pooled", "fedprox", "fedavg", "meta_fixed", "meta_random")
AJ_KINDS = ("pooled", "fedprox", "fedavg", "meta_fixed", "meta_random")


@dataclass(frozen=True)
class AsymptoticPrediction:
    kind: str
    bias: object
    variance: object
    normalization: str = "final"
    note: str = ""

    def to_dict(self):
        return {
            "kind": self.kind,
            "bias": np.asarray(self.bias).tolist(),
            "variance": np.asarray(self.variance).tolist(),
            "normalization": self.normalization,
            "note": self.note,
        }


def linear_site_variances(spec: LinearDgpSpec):
    """``V_k = sigma^2 / (n_k p_k (1 - p_k)) + |dbeta|^2_{Sigma_k} / n_k`` for every site."""
    n_k = np.asarray(spec.site_sizes, dtype=float)
    p = np.asarray(spec.propensities, dtype=float)
    db = spec.theta1[1:] - spec.theta0[1:]
    quad = np.array([db @ spec.site_cov(k) @ db for k in range(spec.K)])
    return spec.noise_sd**2 / (n_k * p * (1 - p)) + quad / n_k


def v_infinity_linear(kind, spec: LinearDgpSpec) -> AsymptoticPrediction:
    """Asymptotic variance (and bias) of a linear ATE estimator.

    ``local`` returns one value per site. ``meta_ivw`` is
    ``(sum_k 1 / V_k)^-1``; its bias ``sum_k w_k tau_k - tau`` is nonzero
    when site effects differ. ``one_shot_sw`` is the pooled-type row;
    ``one_shot_sw_derived`` is the variance of averaging local arm fits,
    which equals the Meta-SW row.
    """
    if kind not in LINEAR_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}; expected one of {LINEAR_KINDS}")
    rho = spec.rho
    n = spec.n
    s2 = spec.noise_sd**2
    V = linear_site_variances(spec)
    diff = spec.theta1 - spec.theta0
    site_tau = diff[0] + spec.covariate_means @ diff[1:]
    tau = float(rho @ site_tau)
    if kind == "local":
        return AsymptoticPrediction(kind, site_tau - tau, V, note="per site; bias relative to the rho-mixture ATE")
    if kind in ("meta_sw", "one_shot_sw_derived"):
        return AsymptoticPrediction(kind, 0.0, float(rho**2 @ V))
    if kind == "meta_ivw":
        w = (1.0 / V) / np.sum(1.0 / V)
        return AsymptoticPrediction(kind, float(w @ site_tau - tau), float(1.0 / np.sum(1.0 / V)))
    p = spec.pooled_propensity
    S = sum(r * spec.site_cov(k) for k, r in enumerate(rho))
    db = diff[1:]
    return AsymptoticPrediction(kind, 0.0, float(s2 / (n * p * (1 - p)) + db @ S @ db / n))


# --------------------------------------------------------------------------
# Cox


def _cox_inputs(deltas, H, rho, n):
    rho = np.asarray(rho, dtype=float)
    K = rho.size
    H = np.asarray(H, dtype=float)
    if H.ndim == 1:  # scalar information per site
        H = H.reshape(K, 1, 1)
    d = H.shape[-1]
    deltas = np.asarray(deltas, dtype=float).reshape(K, d)
    if H.shape != (K, d, d):
        raise ValueError("H must have shape (K, d, d)")
    n_k = rho * n
    return deltas, H, rho, n_k, K, d


def cox_asymptotics(kind, deltas, H, rho, n, weights=None) -> AsymptoticPrediction:
    """Asymptotic bias and covariance of a federated Cox coefficient.

    ``H[k]`` is site k's per-observation information, so ``n_k H_k`` is its
    total. ``weights`` (K, or K x d for coordinate-wise meta-analysis) is
    required for the meta rows.
    """
    if kind not in COX_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}; expected one of {COX_KINDS}")
    deltas, H, rho, n_k, K, d = _cox_inputs(deltas, H, rho, n)
    total = np.einsum("k,kij->ij", n_k, H)
    try:
        inv_total = np.linalg.inv(total)
        site_cov = np.array([np.linalg.inv(n_k[k] * H[k]) for k in range(K)])
    except np.linalg.LinAlgError:
        raise SingularInformation("information matrix is singular") from None
    if kind in ("pooled", "fedprox"):
        return AsymptoticPrediction(kind, np.zeros(d), inv_total)
    if kind == "fedavg":
        W = np.repeat(rho[:, None], d, axis=1)
    else:
        if weights is None:
            raise ValueError(f"{kind} needs site weights")
        W = np.asarray(weights, dtype=float)
        if W.ndim == 1:
            W = np.repeat(W[:, None], d, axis=1)
    bias = np.einsum("kj,kj->j", W, deltas)
    cov = np.einsum("ki,kij,kj->ij", W, site_cov, W)
    return AsymptoticPrediction(kind, bias, cov)


# --------------------------------------------------------------------------
# Aalen-Johansen


def aj_asymptotics(kind, b, V, rho, n, weights=None, normalization="final") -> AsymptoticPrediction:
    """Pointwise asymptotic bias and variance of an aggregated CIF.

    ``b`` and ``V`` are (K, G) arrays on a common grid: site biases
    relative to the target and per-observation asymptotic variances
    (``Var F_k(t) ~ V_k(t) / n_k``). ``weights`` (K or K x G) replace the
    sample-size weights in the meta rows; without them ``meta_fixed``
    uses ``rho_k`` exactly like ``fedavg``.

    ``normalization="final"`` gives the variance of the aggregated
    estimator, ``sum_k w_k^2 V_k / n_k``. ``"as_printed"`` evaluates the
    table rows literally (``sum_k w_k^2 V_k`` for the weighted rows and
    ``(1/n) sum_k rho_k V_k`` for the pooled rows).
    """
    if kind not in AJ_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}; expected one of {AJ_KINDS}")
    if normalization not in ("final", "as_printed"):
        raise ValueError("normalization must be 'final' or 'as_printed'")
    rho = np.asarray(rho, dtype=float)
    b = np.atleast_2d(np.asarray(b, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    K = rho.size
    if b.shape != V.shape or b.shape[0] != K:
        raise ValueError("b and V must both be (K, G) on the same grid")
    G = b.shape[1]
    n_k = rho * n
    if kind in ("pooled", "fedprox"):
        return AsymptoticPrediction(kind, np.zeros(G), (rho @ V) / n, normalization)
    if kind == "fedavg" or (kind == "meta_fixed" and weights is None):
        W = np.repeat(rho[:, None], G, axis=1)
    else:
        if weights is None:
            raise ValueError(f"{kind} needs site weights")
        W = np.asarray(weights, dtype=float)
        if W.ndim == 1:
            W = np.repeat(W[:, None], G, axis=1)
        if W.shape != (K, G):
            raise ValueError("weights must be (K,) or (K, G)")
    bias = np.sum(W * b, axis=0)
    if normalization == "final":
        var = np.sum(W**2 * V / n_k[:, None], axis=0)
    else:
        var = np.sum(W**2 * V, axis=0)
    return AsymptoticPrediction(kind, bias, var, normalization)
