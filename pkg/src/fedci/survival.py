"""Per-site time-to-event estimators.

Cox partial likelihood with Breslow ties and a Newton solver, Kaplan-Meier
with Greenwood variance, Nelson-Aalen, and the Aalen-Johansen cumulative
incidence with an Aalen-type (default) or delta-method variance.

All curves are right-continuous steps: the value at ``t`` is the level at
the largest jump time ``<= t``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptyRiskSet, MonotoneLikelihood, NonConvergence, UnknownCause

__all__ = [
    "CoxFit",
    "CoxProblem",
    "StepCurve",
    "CifEstimate",
    "cox_partial_loglik",
    "fit_cox",
    "fit_cox_stratified",
    "newton_maximize",
    "kaplan_meier",
    "nelson_aalen",
    "aalen_johansen",
    "aalen_johansen_from_counts",
    "count_table",
    "merge_count_tables",
]


@dataclass(frozen=True)
class CoxFit:
    """Fitted site coefficients.

    ``info`` is the observed information scaled per observation,
    ``-(1/n) d^2 loglik`` at ``beta``; ``n * info`` is the total.
    """

    beta: np.ndarray
    info: np.ndarray
    n: int
    loglik: float
    converged: bool
    iterations: int
    gradient: np.ndarray | None = None


class CoxProblem:
    """Partial likelihood of one sample, pre-sorted for repeated evaluation.

    Constructing it reads the sample's rows, so inside a federated run it
    must be built from the owning site's scope.
    """

    def __init__(self, sample, cause=None):
        T = sample.T
        delta = sample.delta
        if cause is None:
            event = delta > 0
        else:
            _check_cause(sample, cause)
            event = delta == cause
        if not event.any():
            raise EmptyRiskSet(f"site {sample.site_id}: no events")
        order = np.argsort(-T, kind="stable")
        self.X = np.ascontiguousarray(sample.X[order])
        self.time = np.ascontiguousarray(T[order])
        self.event = event[order].astype(np.int8)
        self.n, self.d = self.X.shape
        self.n_events = int(self.event.sum())
        self.site_id = sample.site_id

    def __call__(self, beta):
        """``(loglik, gradient, hessian)`` at ``beta`` (Hessian is negative semidefinite)."""
        beta = np.asarray(beta, dtype=float)
        return kernels.cox_breslow(self.X, self.X @ beta, self.event, self.time)


def cox_partial_loglik(beta, sample, cause=None):
    """Breslow log partial likelihood with its analytic gradient and Hessian.

    Events are ``delta > 0`` when ``cause`` is None, else ``delta == cause``.
    """
    return CoxProblem(sample, cause)(beta)


def newton_maximize(fun, init, tol=1e-8, max_iter=50, bound=50.0, step_tol=1e-6):
    """Damped Newton ascent on a concave objective.

    ``fun(x)`` returns ``(value, gradient, hessian)``. Every accepted step
    does not decrease the value (step-halving). Converged means
    ``max|gradient| < tol * max(1, max|hessian|)`` and
    ``max|newton step| < step_tol``.

    Returns ``(x, value, gradient, hessian, iterations, converged)``.
    """
    x = np.array(init, dtype=float)
    val, g, H = fun(x)
    it = 0
    while True:
        try:
            L = np.linalg.cholesky(-H)
        except np.linalg.LinAlgError:
            raise MonotoneLikelihood(
                f"information not positive definite at {x}: no unique finite maximiser"
            ) from None
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        # gradient tolerance scales with the curvature so large samples are not held to rounding noise
        gtol = tol * max(1.0, float(np.max(np.abs(H), initial=0.0)))
        if np.max(np.abs(g), initial=0.0) < gtol and np.max(np.abs(step), initial=0.0) < step_tol:
            return x, val, g, H, it, True
        if it >= max_iter:
            raise NonConvergence(f"Newton did not converge in {max_iter} iterations (|g|={np.abs(g).max():.3g})")
        t = 1.0
        while True:
            cand = x + t * step
            v2, g2, H2 = fun(cand)
            # near the optimum a true ascent step can lose a few ulps to rounding
            if v2 >= val - 64 * np.finfo(float).eps * (1.0 + abs(val)):
                break
            t *= 0.5
            if t < 1e-12:
                # no ascent left at floating-point resolution
                return x, val, g, H, it, bool(np.abs(g).max() < gtol)
        x, val, g, H = cand, v2, g2, H2
        it += 1
        if np.max(np.abs(x)) > bound:
            raise MonotoneLikelihood(f"|beta| exceeded {bound}: partial likelihood is monotone")


def fit_cox(sample, init=None, tol=1e-8, max_iter=50, bound=50.0, cause=None) -> CoxFit:
    """Maximum partial likelihood fit by Newton with step-halving.

    Raises
    ------
    MonotoneLikelihood
        If the coefficients diverge past ``bound`` or the information
        becomes singular (separation).
    NonConvergence
        After ``max_iter`` iterations.
    """
    prob = sample if isinstance(sample, CoxProblem) else CoxProblem(sample, cause)
    init = np.zeros(prob.d) if init is None else init
    beta, ll, g, H, it, ok = newton_maximize(prob, init, tol, max_iter, bound)
    return CoxFit(beta, -H / prob.n, prob.n, float(ll), ok, it, g)


def fit_cox_stratified(samples, init=None, tol=1e-8, max_iter=50, bound=50.0, cause=None) -> CoxFit:
    """Pooled Cox fit with one baseline hazard per sample (stratum).

    Reads every sample's rows; an oracle, never a federated estimator.
    """
    probs = [s if isinstance(s, CoxProblem) else CoxProblem(s, cause) for s in samples]

    def fun(beta):
        parts = [p(beta) for p in probs]
        return (
            sum(p[0] for p in parts),
            sum(p[1] for p in parts),
            sum(p[2] for p in parts),
        )

    n = sum(p.n for p in probs)
    init = np.zeros(probs[0].d) if init is None else init
    beta, ll, g, H, it, ok = newton_maximize(fun, init, tol, max_iter, bound)
    return CoxFit(beta, -H / n, n, float(ll), ok, it, g)


# --------------------------------------------------------------------------
# step curves


@dataclass(frozen=True)
class StepCurve:
    times: np.ndarray
    values: np.ndarray
    variances: np.ndarray
    start: float = 0.0

    def __post_init__(self):
        if not (len(self.times) == len(self.values) == len(self.variances)):
            raise ValueError("times, values and variances must have equal length")

    def __call__(self, t):
        return self._eval(self.values, self.start, t)

    def variance_at(self, t):
        return self._eval(self.variances, 0.0, t)

    def _eval(self, arr, start, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        out = np.where(idx >= 0, np.asarray(arr)[np.maximum(idx, 0)] if len(arr) else start, start)
        return out if out.ndim else float(out)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "value", "variance"])
            for t, v, s in zip(self.times, self.values, self.variances):
                w.writerow([f"{t:.12g}", f"{v:.12g}", f"{s:.12g}"])


@dataclass(frozen=True)
class CifEstimate:
    cause: int
    curve: StepCurve
    n: int

    def __call__(self, t):
        return self.curve(t)

    def variance_at(self, t):
        return self.curve.variance_at(t)


def _check_cause(sample, cause):
    if int(cause) != cause or not 1 <= cause <= sample.n_causes:
        raise UnknownCause(f"cause {cause!r} not in 1..{sample.n_causes}")


def _table(sample):
    T = sample.T
    order = np.argsort(T, kind="stable")
    return kernels.event_table(T[order], sample.delta[order], sample.n_causes)


def _safe_div(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def kaplan_meier(sample) -> StepCurve:
    """Product-limit overall survival (any cause is an event), Greenwood variance."""
    if sample.n == 0:
        return StepCurve(np.zeros(0), np.zeros(0), np.zeros(0), start=1.0)
    times, Y, d, _ = _table(sample)
    S = np.cumprod(1.0 - d / Y)
    # Y == d makes the Greenwood term infinite, but only where S is already 0
    gw = np.cumsum(_safe_div(d, Y * (Y - d)))
    var = np.where(S > 0, S**2 * gw, 0.0)
    return StepCurve(times, S, var, start=1.0)


def nelson_aalen(sample, cause=1) -> StepCurve:
    """Cumulative cause-specific hazard ``sum d_j / Y`` with variance ``sum d_j / Y^2``."""
    _check_cause(sample, cause)
    times, Y, _, dc = _table(sample)
    dj = dc[:, cause - 1] if dc.size else np.zeros(0)
    keep = dj > 0
    Y, dj = Y[keep].astype(float), dj[keep]
    return StepCurve(times[keep], np.cumsum(dj / Y), np.cumsum(dj / Y**2), start=0.0)


def aalen_johansen(sample, cause=1, variance="aalen") -> CifEstimate:
    """Cumulative incidence of ``cause``: ``sum_{u <= t} S(u-) dA_j(u)``.

    ``variance`` is ``"aalen"`` (Aalen-type) or ``"delta"`` (Greenwood /
    delta-method form). The curve has a step at every event time of any
    cause since the variance moves there too.
    """
    _check_cause(sample, cause)
    times, Y, d, dc = _table(sample)
    return _aj_core(times, Y, d, dc[:, cause - 1] if dc.size else np.zeros(0), cause, variance, sample.n)


def count_table(sample):
    """Per distinct observed time: events of each cause and censorings.

    Returns ``(times, events (m, J), censored (m,))``. This is everything
    the Aalen-Johansen estimator needs, and tables from several sites merge
    into the pooled one (:func:`merge_count_tables`).
    """
    T = sample.T
    delta = sample.delta
    times, inv = np.unique(T, return_inverse=True)
    J = sample.n_causes
    ev = np.zeros((times.size, J), dtype=np.int64)
    for j in range(1, J + 1):
        ev[:, j - 1] = np.bincount(inv, weights=(delta == j), minlength=times.size).astype(np.int64)
    cens = np.bincount(inv, weights=(delta == 0), minlength=times.size).astype(np.int64)
    return times, ev, cens


def merge_count_tables(tables):
    times = np.unique(np.concatenate([t[0] for t in tables]))
    J = tables[0][1].shape[1]
    ev = np.zeros((times.size, J), dtype=np.int64)
    cens = np.zeros(times.size, dtype=np.int64)
    for t, e, c in tables:
        idx = np.searchsorted(times, t)
        np.add.at(ev, idx, e)
        np.add.at(cens, idx, c)
    return times, ev, cens


def aalen_johansen_from_counts(times, events, censored, cause=1, variance="aalen") -> CifEstimate:
    """Aalen-Johansen estimate from a (possibly merged) count table."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    censored = np.asarray(censored)
    if not 1 <= cause <= events.shape[1]:
        raise UnknownCause(f"cause {cause!r} not in 1..{events.shape[1]}")
    n = int(events.sum() + censored.sum())
    removed = events.sum(axis=1) + censored
    Y = n - np.concatenate([[0], np.cumsum(removed)[:-1]])
    d = events.sum(axis=1)
    keep = d > 0
    return _aj_core(times[keep], Y[keep], d[keep], events[keep, cause - 1], cause, variance, n)


def _aj_core(times, Y, d, dj, cause, variance, n):
    if variance not in ("aalen", "delta"):
        raise ValueError("variance must be 'aalen' or 'delta'")
    if times.size == 0:
        return CifEstimate(cause, StepCurve(times, np.zeros(0), np.zeros(0)), n)
    Y = np.asarray(Y, dtype=float)
    d = np.asarray(d, dtype=float)
    dj = np.asarray(dj, dtype=float)
    S = np.cumprod(1.0 - d / Y)
    S_lag = np.concatenate([[1.0], S[:-1]])
    F = np.cumsum(S_lag * dj / Y)
    if variance == "aalen":
        a = _safe_div(d, (Y - 1.0) * (Y - d))
        b = _safe_div(S_lag**2 * dj * (Y - dj), Y**2 * (Y - 1.0))
        c = _safe_div(S_lag * dj * (Y - dj), Y * (Y - d) * (Y - 1.0))
    else:
        a = _safe_div(d, Y * (Y - d))
        b = S_lag**2 * dj * (Y - dj) / Y**3
        c = S_lag * dj / Y**2
    # sum_i a_i (F_m - F_i)^2 + b_i - 2 c_i (F_m - F_i), expanded into prefix sums
    A1, A2, A3 = np.cumsum(a), np.cumsum(a * F), np.cumsum(a * F**2)
    C1, C2 = np.cumsum(c), np.cumsum(c * F)
    var = F**2 * A1 - 2.0 * F * A2 + A3 + np.cumsum(b) - 2.0 * (F * C1 - C2)
    var = np.maximum(var, 0.0)
    return CifEstimate(cause, StepCurve(times, F, var, start=0.0), n)
