"""Per-site estimators for a binary treatment and a continuous outcome.

Each arm gets its own OLS fit on the intercept-augmented design
``(1, X)``. The local ATE averages the fitted arm difference over the site's
covariate rows; its variance is the homoscedastic plug-in

    sigma^2 / (n p (1 - p)) + (beta1 - beta0)' Sigma (beta1 - beta0) / n.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Condition1Violation

__all__ = [
    "ArmModel",
    "AteEstimate",
    "GramSummary",
    "design_matrix",
    "fit_arm_ols",
    "local_ate",
    "plugin_variance",
    "model_ate",
    "cate",
    "gram_summary",
]


def design_matrix(X):
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass(frozen=True)
class ArmModel:
    arm: int
    params: np.ndarray
    n_used: int
    gram: np.ndarray
    xty: np.ndarray
    rss: float


@dataclass(frozen=True)
class AteEstimate:
    value: float
    variance: float
    site_id: object
    n: int


@dataclass(frozen=True)
class GramSummary:
    """Exact sufficient statistics of a linear sample.

    ``gram[w]``, ``xty[w]``, ``yty[w]`` and ``n_arm[w]`` are sums over arm
    ``w`` on the augmented design; ``x_sum`` and ``x_outer`` are covariate
    first and second moment sums over all rows. Summaries add.
    """

    gram: np.ndarray  # (2, p, p)
    xty: np.ndarray  # (2, p)
    yty: np.ndarray  # (2,)
    n_arm: np.ndarray  # (2,)
    x_sum: np.ndarray  # (d,)
    x_outer: np.ndarray  # (d, d)
    n: int

    def __add__(self, other):
        return GramSummary(
            self.gram + other.gram,
            self.xty + other.xty,
            self.yty + other.yty,
            self.n_arm + other.n_arm,
            self.x_sum + other.x_sum,
            self.x_outer + other.x_outer,
            self.n + other.n,
        )

    @property
    def x_mean(self):
        return self.x_sum / self.n if self.n else np.zeros_like(self.x_sum)

    @property
    def x_cov(self):
        """Covariate covariance (denominator n - 1)."""
        m = self.x_mean
        if self.n < 2:
            return np.zeros_like(self.x_outer)
        return (self.x_outer - self.n * np.outer(m, m)) / (self.n - 1)

    @property
    def size(self):
        """Scalars needed to transmit the per-arm normal equations."""
        p = self.xty.shape[1]
        return 2 * (p * p + p)


def _arm_rows(sample, arm):
    mask = sample.W == arm
    return design_matrix(sample.X[mask]), sample.Y[mask]


def fit_arm_ols(sample, arm: int) -> ArmModel:
    """OLS of arm ``arm``'s outcomes on ``(1, X)``.

    Raises
    ------
    Condition1Violation
        If the arm design has rank below d + 1 (including n_arm <= d).
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    Xa, ya = _arm_rows(sample, arm)
    p = Xa.shape[1]
    if Xa.shape[0] < p:
        raise Condition1Violation(arm, Xa.shape[0], p, sample.site_id)
    params, _, rank, _ = np.linalg.lstsq(Xa, ya, rcond=None)
    if rank < p:
        raise Condition1Violation(arm, int(rank), p, sample.site_id)
    resid = ya - Xa @ params
    return ArmModel(
        arm=arm,
        params=params,
        n_used=Xa.shape[0],
        gram=Xa.T @ Xa,
        xty=Xa.T @ ya,
        rss=float(resid @ resid),
    )


def plugin_variance(sigma2, n, p, dbeta=None, cov=None):
    """``sigma2 / (n p (1 - p)) + dbeta' cov dbeta / n``."""
    v = sigma2 / (n * p * (1.0 - p))
    if dbeta is not None and np.size(dbeta):
        dbeta = np.asarray(dbeta, dtype=float)
        v += float(dbeta @ np.atleast_2d(cov) @ dbeta) / n
    return v


def local_ate(sample) -> AteEstimate:
    """Site ATE from its own two arm fits, with plug-in variance."""
    m1 = fit_arm_ols(sample, 1)
    m0 = fit_arm_ols(sample, 0)
    X = sample.X
    n, d = X.shape
    diff = m1.params - m0.params
    value = diff[0] + float(X.mean(axis=0) @ diff[1:]) if d else float(diff[0])
    dof = n - 2 * (d + 1)
    sigma2 = (m1.rss + m0.rss) / dof if dof > 0 else 0.0
    p_hat = m1.n_used / n
    cov = np.cov(X, rowvar=False, ddof=1) if d and n > 1 else np.zeros((d, d))
    var = plugin_variance(sigma2, n, p_hat, diff[1:], cov)
    return AteEstimate(float(value), float(var), sample.site_id, n)


def _check_params(theta1, theta0, d):
    theta1 = np.asarray(theta1, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    if theta1.shape != (d + 1,) or theta0.shape != (d + 1,):
        raise ValueError(f"parameters must have length d+1 = {d + 1}")
    return theta1, theta0


def model_ate(sample, theta1, theta0) -> float:
    """Mean of ``(1, x)(theta1 - theta0)`` over the site's rows; no refit."""
    theta1, theta0 = _check_params(theta1, theta0, sample.d)
    diff = theta1 - theta0
    if sample.d == 0:
        return float(diff[0])
    return float(diff[0] + sample.X.mean(axis=0) @ diff[1:])


def cate(x, theta1, theta0) -> float:
    """Conditional effect ``(1, x) theta1 - (1, x) theta0`` at one covariate row."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    theta1, theta0 = _check_params(theta1, theta0, x.size)
    z = np.concatenate([[1.0], x])
    return float(z @ theta1 - z @ theta0)


def gram_summary(sample) -> GramSummary:
    X = sample.X
    Y = sample.Y
    W = sample.W
    D = design_matrix(X)
    p = D.shape[1]
    gram = np.zeros((2, p, p))
    xty = np.zeros((2, p))
    yty = np.zeros(2)
    n_arm = np.zeros(2, dtype=np.int64)
    for w in (0, 1):
        m = W == w
        Dw, yw = D[m], Y[m]
        gram[w] = Dw.T @ Dw
        xty[w] = Dw.T @ yw
        yty[w] = yw @ yw
        n_arm[w] = int(m.sum())
    return GramSummary(gram, xty, yty, n_arm, X.sum(axis=0), X.T @ X, X.shape[0])
