"""Post-estimation combination rules.

Scalar meta-analysis (sample-size, inverse-variance, random effects with a
DerSimonian-Laird between-site variance), similarity weights from covariate
moments (Gaussian kernel or inverse distance), parameter federation for the
one-shot estimators, information-weighted Cox combination, and pointwise
CIF aggregation on the union of jump times.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import Condition2Violation, DegenerateWeights, SingularInformation
from .survival import CifEstimate, CoxFit, StepCurve

__all__ = [
    "SampleSize",
    "InverseVariance",
    "RandomEffects",
    "Kernel",
    "Distance",
    "AggregateEstimate",
    "ReferenceSummary",
    "MomentSummary",
    "SiteValue",
    "DISTANCE_FLOOR",
    "normalize",
    "meta_combine",
    "combine_with_weights",
    "estimate_tau2",
    "reference_from_moments",
    "similarity_weights",
    "federate_arm_params",
    "fed_cox_ivw",
    "fed_cox_meta",
    "cif_aggregate",
    "AggregatedCif",
]

DISTANCE_FLOOR = 1e-9


@dataclass(frozen=True)
class SampleSize:
    tag = "sample_size"


@dataclass(frozen=True)
class InverseVariance:
    tag = "inverse_variance"


@dataclass(frozen=True)
class RandomEffects:
    """Random-effects weights ``1 / (V_k + tau2)``; ``tau2=None`` estimates it (DL)."""

    tau2: float | None = None
    tag = "random_effects"

    def __post_init__(self):
        if self.tau2 is not None and not self.tau2 >= 0:
            raise ValueError("tau2 must be nonnegative")


@dataclass(frozen=True)
class Kernel:
    bandwidth: float = 1.0
    tag = "kernel"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class Distance:
    metric: str = "euclidean"
    tag = "distance"

    def __post_init__(self):
        if self.metric not in ("euclidean", "mahalanobis"):
            raise ValueError("metric must be 'euclidean' or 'mahalanobis'")


@dataclass(frozen=True)
class SiteValue:
    """A scalar site estimate; anything with ``value``, ``variance`` and ``n`` works."""

    value: float
    variance: float
    n: int
    site_id: object = None


@dataclass
class AggregateEstimate:
    value: float | np.ndarray
    variance: float | np.ndarray
    weights: np.ndarray
    scheme: str
    sites_used: tuple
    provenance: dict = field(default_factory=dict)


def normalize(w):
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DegenerateWeights("weights must be finite and nonnegative")
    s = w.sum()
    if s <= 0:
        raise DegenerateWeights("weights sum to zero")
    return w / s


def _unpack(estimates):
    if len(estimates) == 0:
        raise ValueError("no estimates to combine")
    v = np.array([e.value for e in estimates], dtype=float)
    var = np.array([e.variance for e in estimates], dtype=float)
    n = np.array([getattr(e, "n", np.nan) for e in estimates], dtype=float)
    ids = tuple(getattr(e, "site_id", i) for i, e in enumerate(estimates))
    return v, var, n, ids


def estimate_tau2(estimates) -> float:
    """DerSimonian-Laird between-site variance, truncated at 0."""
    if len(estimates) < 2:
        raise ValueError("tau^2 needs at least two estimates")
    y, v, _, _ = _unpack(estimates)
    return _dl_tau2(y, v)


def _dl_tau2(y, v):
    if np.any(v <= 0):
        raise DegenerateWeights("DerSimonian-Laird needs strictly positive variances")
    w = 1.0 / v
    ybar = (w @ y) / w.sum()
    Q = w @ (y - ybar) ** 2
    C = w.sum() - (w @ w) / w.sum()
    if C <= 0:
        return 0.0
    return float(max(0.0, (Q - (y.size - 1)) / C))


def meta_combine(estimates, scheme=InverseVariance()) -> AggregateEstimate:
    """Weighted mean of site estimates; variance ``sum w_k^2 V_k``."""
    y, v, n, ids = _unpack(estimates)
    prov = {}
    if isinstance(scheme, SampleSize):
        if np.any(~np.isfinite(n)):
            raise ValueError("sample-size weights need n on every estimate")
        w = normalize(n)
    elif isinstance(scheme, InverseVariance):
        if np.any(v <= 0):
            raise DegenerateWeights("inverse-variance weights need strictly positive variances")
        w = normalize(1.0 / v)
    elif isinstance(scheme, RandomEffects):
        if np.any(v <= 0):
            raise DegenerateWeights("random-effects weights need strictly positive variances")
        tau2 = scheme.tau2
        if tau2 is None:
            tau2 = _dl_tau2(y, v) if y.size >= 2 else 0.0
        prov["tau2"] = float(tau2)
        w = normalize(1.0 / (v + tau2))
    else:
        raise TypeError(f"meta_combine does not handle {type(scheme).__name__}; use combine_with_weights")
    return AggregateEstimate(float(w @ y), float(w**2 @ v), w, scheme.tag, ids, prov)


def combine_with_weights(estimates, weights, scheme="custom") -> AggregateEstimate:
    y, v, _, ids = _unpack(estimates)
    w = normalize(weights)
    return AggregateEstimate(float(w @ y), float(w**2 @ v), w, scheme, ids)


# --------------------------------------------------------------------------
# similarity weights


@dataclass(frozen=True)
class MomentSummary:
    """Covariate moment sums of one site: count, sum and sum of outer products."""

    n: int
    x_sum: np.ndarray
    x_outer: np.ndarray

    @property
    def mean(self):
        return self.x_sum / self.n

    @classmethod
    def from_sample(cls, sample):
        X = sample.X
        return cls(X.shape[0], X.sum(axis=0), X.T @ X)


@dataclass(frozen=True)
class ReferenceSummary:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def reference_from_moments(moments: Sequence) -> ReferenceSummary:
    """Pooled mean and covariance (denominator n - 1) from site moment sums."""
    n = sum(m.n for m in moments)
    s = sum(np.asarray(m.x_sum, dtype=float) for m in moments)
    ss = sum(np.asarray(m.x_outer, dtype=float) for m in moments)
    mean = s / n
    cov = (ss - n * np.outer(mean, mean)) / max(n - 1, 1)
    cov = 0.5 * (cov + cov.T)
    return ReferenceSummary(mean, cov, n)


def similarity_weights(site_moments, reference: ReferenceSummary, scheme) -> np.ndarray:
    """Normalised weights from each site's covariate mean vs the reference mean.

    Kernel: ``exp(-|m_k - m|^2 / (2 bandwidth^2))``. Distance: ``1 / dist``
    with Euclidean or Mahalanobis (reference covariance) metric; distances
    are floored at ``DISTANCE_FLOOR`` so a site matching the reference gets
    a large but finite weight.
    """
    means = np.array([np.asarray(m.mean, dtype=float) for m in site_moments])
    diff = means - np.asarray(reference.mean, dtype=float)
    if isinstance(scheme, Kernel):
        sq = np.einsum("ij,ij->i", diff, diff)
        logw = -sq / (2.0 * scheme.bandwidth**2)
        return normalize(np.exp(logw - logw.max()))
    if isinstance(scheme, Distance):
        if scheme.metric == "euclidean":
            dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        else:
            sol = np.linalg.solve(np.atleast_2d(reference.cov), diff.T).T
            dist = np.sqrt(np.maximum(np.einsum("ij,ij->i", diff, sol), 0.0))
        return normalize(1.0 / np.maximum(dist, DISTANCE_FLOOR))
    raise TypeError(f"similarity_weights needs Kernel or Distance, got {type(scheme).__name__}")


# --------------------------------------------------------------------------
# parameter federation


def federate_arm_params(site_outputs, mode):
    """Federated ``(theta1, theta0)`` from per-site outputs.

    ``mode="sw"``: ``site_outputs`` are ``(n_k, ArmModel1, ArmModel0)`` and
    the parameters are averaged with weights ``n_k / n``.
    ``mode="ivw"``: ``site_outputs`` carry per-arm ``gram`` and ``xty``
    (e.g. :class:`~fedci.linear.GramSummary`) and support ``+``; the summed
    normal equations are solved, which is the pooled OLS fit.
    """
    if mode == "sw":
        n = np.array([o[0] for o in site_outputs], dtype=float)
        rho = n / n.sum()
        theta1 = sum(r * o[1].params for r, o in zip(rho, site_outputs))
        theta0 = sum(r * o[2].params for r, o in zip(rho, site_outputs))
        return theta1, theta0
    if mode == "ivw":
        total = site_outputs[0]
        for s in site_outputs[1:]:
            total = total + s
        out = []
        for w in (1, 0):
            G = total.gram[w]
            p = G.shape[0]
            rank = np.linalg.matrix_rank(G)
            if rank < p:
                raise Condition2Violation(w, int(rank), p)
            out.append(np.linalg.solve(G, total.xty[w]))
        return out[0], out[1]
    raise ValueError(f"unknown one-shot mode {mode!r}")


# --------------------------------------------------------------------------
# Cox


def fed_cox_ivw(fits: Sequence[CoxFit]) -> AggregateEstimate:
    """``(sum n_k H_k)^-1 sum n_k H_k beta_k`` with variance ``(sum n_k H_k)^-1``."""
    if not fits:
        raise ValueError("no fits to combine")
    infos = [f.n * np.atleast_2d(f.info) for f in fits]
    total = sum(infos)
    try:
        cov = np.linalg.inv(total)
        np.linalg.cholesky(total)
    except np.linalg.LinAlgError:
        raise SingularInformation("summed information matrix is singular") from None
    beta = cov @ sum(I @ f.beta for I, f in zip(infos, fits))
    n = np.array([f.n for f in fits], dtype=float)
    return AggregateEstimate(beta, cov, n / n.sum(), "information", tuple(range(len(fits))))


def fed_cox_meta(fits: Sequence[CoxFit], scheme) -> AggregateEstimate:
    """Coordinate-wise meta-analysis of Cox coefficients.

    Site variances are the diagonal of ``(n_k H_k)^-1``. ``weights`` has
    shape ``(K, d)``; ``variance`` is the full covariance
    ``sum_k D_k (n_k H_k)^-1 D_k`` with ``D_k = diag(weights[k])``.
    """
    covs = np.array([np.linalg.inv(f.n * np.atleast_2d(f.info)) for f in fits])
    betas = np.array([f.beta for f in fits])
    K, d = betas.shape
    W = np.empty((K, d))
    tau2 = []
    for j in range(d):
        ests = [SiteValue(betas[k, j], covs[k, j, j], fits[k].n) for k in range(K)]
        agg = meta_combine(ests, scheme)
        W[:, j] = agg.weights
        tau2.append(agg.provenance.get("tau2", 0.0))
    value = np.einsum("kj,kj->j", W, betas)
    cov = np.einsum("ki,kij,kj->ij", W, covs, W)
    return AggregateEstimate(value, cov, W, scheme.tag, tuple(range(K)), {"tau2": tau2})


# --------------------------------------------------------------------------
# CIF


def _union_grid(curves):
    grids = [np.asarray(c.curve.times) for c in curves]
    return np.unique(np.concatenate(grids)) if grids else np.zeros(0)


def cif_aggregate(curves: Sequence[CifEstimate], scheme=SampleSize(), floor=DISTANCE_FLOOR) -> CifEstimate:
    """Pointwise combination of site CIFs on the union of their jump times.

    Sample-size weights are constant; inverse-variance and random-effects
    weights are recomputed at every grid time from the site variances
    (``tau2`` by DerSimonian-Laird at each time). Variances are floored at
    ``floor`` and the number of floored (site, time) pairs is returned in
    ``floored``. Time-varying weights can produce a curve that dips, so the
    pointwise values are sorted (monotone rearrangement, which never moves
    the curve further from a nondecreasing target); ``rearranged`` counts
    the grid times that changed. Sample-size weights never need it.
    """
    if not curves:
        raise ValueError("no curves to aggregate")
    cause = curves[0].cause
    if any(c.cause != cause for c in curves):
        raise ValueError("all curves must be for the same cause")
    grid = _union_grid(curves)
    F = np.array([c.curve(grid) for c in curves]).reshape(len(curves), grid.size)
    V = np.array([c.curve.variance_at(grid) for c in curves]).reshape(len(curves), grid.size)
    n = np.array([c.n for c in curves], dtype=float)
    floored = 0
    if isinstance(scheme, SampleSize):
        W = np.repeat((n / n.sum())[:, None], grid.size, axis=1)
    elif isinstance(scheme, (InverseVariance, RandomEffects)):
        floored = int(np.sum(V < floor))
        Vf = np.maximum(V, floor)
        if isinstance(scheme, RandomEffects):
            if scheme.tau2 is not None:
                tau2 = np.full(grid.size, scheme.tau2)
            elif len(curves) >= 2:
                tau2 = np.array([_dl_tau2(F[:, i], Vf[:, i]) for i in range(grid.size)])
            else:
                tau2 = np.zeros(grid.size)
            inv = 1.0 / (Vf + tau2)
        else:
            inv = 1.0 / Vf
        W = inv / inv.sum(axis=0)
    else:
        raise TypeError(f"cif_aggregate does not handle {type(scheme).__name__}")
    raw = np.sum(W * F, axis=0)
    # time-varying weights can make the pointwise mix dip; sorting is the monotone rearrangement
    value = np.sort(raw)
    rearranged = int(np.sum(value != raw))
    var = np.sum(W**2 * V, axis=0)
    return AggregatedCif(cause, StepCurve(grid, value, var, start=0.0), int(n.sum()), W, scheme.tag, floored, rearranged)


@dataclass(frozen=True)
class AggregatedCif(CifEstimate):
    """A :class:`CifEstimate` that also carries the per-time weights ``(K, G)``."""

    weights: np.ndarray = None
    scheme: str = "sample_size"
    floored: int = 0
    rearranged: int = 0
