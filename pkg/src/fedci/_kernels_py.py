"""Pure numpy kernels. Reference implementation and fallback for ``_kernels``."""
import numpy as np


def _group_ends(time):
    # rows are sorted by time (either direction); index of the last row of each tie group
    n = time.shape[0]
    change = np.flatnonzero(time[1:] != time[:-1])
    ends = np.append(change, n - 1)
    gid = np.zeros(n, dtype=np.intp)
    gid[change + 1] = 1
    return ends[np.cumsum(gid)]


def cox_breslow(X, eta, event, time):
    """Breslow partial log-likelihood, gradient and Hessian.

    Rows must be sorted by ``time`` in decreasing order so that the risk
    set of row i is a prefix ending at the last row tied with it.
    """
    n, d = X.shape
    m = eta.max() if n else 0.0
    w = np.exp(eta - m)
    end = _group_ends(time)
    ev = event.astype(bool)
    S0 = np.cumsum(w)[end][ev]
    S1 = np.cumsum(w[:, None] * X, axis=0)[end][ev]
    S2 = np.cumsum(w[:, None, None] * X[:, :, None] * X[:, None, :], axis=0)[end][ev]
    mean = S1 / S0[:, None]
    loglik = float(np.sum(eta[ev] - m - np.log(S0)))
    grad = np.sum(X[ev] - mean, axis=0)
    hess = -(np.sum(S2 / S0[:, None, None], axis=0) - mean.T @ mean)
    return loglik, grad, hess


def event_table(time, delta, n_causes):
    """Distinct event times with at-risk counts and per-cause event counts.

    ``time`` must be sorted ascending. Returns ``(times, at_risk, d_total,
    d_cause)`` restricted to times with at least one event; ``d_cause`` has
    one column per cause.
    """
    n = time.shape[0]
    ev_times = time[delta > 0]
    times = np.unique(ev_times)
    at_risk = n - np.searchsorted(time, times, side="left")
    d_cause = np.zeros((times.size, n_causes), dtype=np.int64)
    for j in range(n_causes):
        tj = time[delta == j + 1]
        d_cause[:, j] = np.searchsorted(tj, times, side="right") - np.searchsorted(tj, times, side="left")
    return times, at_risk.astype(np.int64), d_cause.sum(axis=1), d_cause
