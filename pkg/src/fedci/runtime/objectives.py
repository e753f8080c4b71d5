"""Site loss functions for the iterative protocols.

An objective is a small frozen description (hashable, shareable with the
server); ``objective.bind(sample)`` runs at the site and returns the local
problem with ``value``, ``grad``, ``prox``, ``lipschitz`` and
``evaluate`` hooks. Losses are per observation so the pooled objective is
``sum_k rho_k L_k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import Condition1Violation
from ..linear import design_matrix, model_ate
from ..survival import CoxProblem, newton_maximize

__all__ = ["ProtocolConfig", "LeastSquares", "CoxObjective", "check_gradient"]


@dataclass(frozen=True)
class ProtocolConfig:
    """Knobs shared by the iterative protocols.

    ``lam`` is the proximal coefficient (FedProx, decomposition). ``eta``
    is the gradient step; ``None`` selects ``1 / L`` from site-reported
    curvature bounds. ``step_decay`` > 0 uses ``eta / (1 + t)^step_decay``
    (peer-to-peer only).
    """

    rounds: int = 100
    lam: float = 1.0
    eta: float | None = None
    local_steps: int = 1
    tol: float = 1e-9
    max_local_iter: int = 200
    step_decay: float = 0.0
    init: tuple | None = None

    def __post_init__(self):
        if int(self.rounds) != self.rounds or self.rounds < 1:
            raise ValueError("rounds must be a positive integer")
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.local_steps < 0:
            raise ValueError("local_steps must be nonnegative")
        if not self.step_decay >= 0:
            raise ValueError("step_decay must be nonnegative")

    def initial(self, dim):
        if self.init is None:
            return np.zeros(dim)
        x = np.asarray(self.init, dtype=float)
        if x.shape != (dim,):
            raise ValueError(f"init must have length {dim}")
        return x.copy()


# --------------------------------------------------------------------------
# least squares


@dataclass(frozen=True)
class LeastSquares:
    """``(1/(2 n_k)) sum_i (y_i - z_i' theta_{w_i})^2``.

    With ``arms=True`` the parameter is ``(theta1, theta0)`` stacked and
    each row uses its own arm's block; otherwise a single model ignores
    treatment. ``intercept`` prepends a column of ones to X.
    """

    arms: bool = True
    intercept: bool = True
    kind = "least_squares"

    def dim(self, d):
        p = d + int(self.intercept)
        return 2 * p if self.arms else p

    def bind(self, sample):
        X = sample.X
        Z = design_matrix(X) if self.intercept else np.asarray(X, dtype=float)
        y = sample.Y
        p = Z.shape[1]
        if self.arms:
            G = np.zeros((2 * p, 2 * p))
            b = np.zeros(2 * p)
            W = sample.W
            for blk, arm in enumerate((1, 0)):
                m = W == arm
                sl = slice(blk * p, (blk + 1) * p)
                G[sl, sl] = Z[m].T @ Z[m]
                b[sl] = Z[m].T @ y[m]
        else:
            G = Z.T @ Z
            b = Z.T @ y
        return QuadraticProblem(self, G, b, float(y @ y), sample.n, sample)


class QuadraticProblem:
    def __init__(self, objective, G, b, c, n, sample):
        self.objective = objective
        self.G = G
        self.b = b
        self.c = c
        self.n = n
        self._sample = sample
        self.dim = b.size

    def value(self, theta):
        return float((theta @ self.G @ theta - 2.0 * self.b @ theta + self.c) / (2.0 * self.n))

    def grad(self, theta):
        return (self.G @ theta - self.b) / self.n

    def hess(self, theta=None):
        return self.G / self.n

    def lipschitz(self):
        return float(np.linalg.eigvalsh(self.G)[-1]) / self.n

    def prox(self, anchor, lam):
        """``argmin L(theta) + (lam/2) |theta - anchor|^2`` in closed form."""
        A = self.G / self.n + lam * np.eye(self.dim)
        rhs = self.b / self.n + lam * np.asarray(anchor, dtype=float)
        try:
            return np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            raise Condition1Violation(-1, int(np.linalg.matrix_rank(self.G)), self.dim, self._sample.site_id) from None

    def minimizer(self):
        return self.prox(np.zeros(self.dim), 0.0)

    def evaluate(self, theta):
        """Final-round report: the site's model ATE when the parameter has arms, else the loss."""
        obj = self.objective
        if obj.arms and obj.intercept:
            p = self.dim // 2
            return model_ate(self._sample, theta[:p], theta[p:])
        return self.value(theta)


# --------------------------------------------------------------------------
# Cox


@dataclass(frozen=True)
class CoxObjective:
    """Negated log partial likelihood per observation, ``-loglik / n_k``."""

    cause: int | None = None
    bound: float = 50.0
    kind = "cox"

    def dim(self, d):
        return d

    def bind(self, sample):
        return CoxLocal(self, CoxProblem(sample, self.cause))


class CoxLocal:
    def __init__(self, objective, problem: CoxProblem):
        self.objective = objective
        self.problem = problem
        self.n = problem.n
        self.dim = problem.d

    def _eval(self, theta):
        return self.problem(np.asarray(theta, dtype=float))

    def value(self, theta):
        return -self._eval(theta)[0] / self.n

    def grad(self, theta):
        return -self._eval(theta)[1] / self.n

    def hess(self, theta):
        return -self._eval(theta)[2] / self.n

    def lipschitz(self):
        # every risk-set covariance is bounded by max_i |x_i - c|^2
        X = self.problem.X
        c = X.mean(axis=0)
        spread = float(np.max(np.sum((X - c) ** 2, axis=1)))
        return max(spread * self.problem.n_events / self.n, 1e-12)

    def prox(self, anchor, lam, tol=1e-10, max_iter=100):
        """Penalized Newton from ``anchor``."""
        a = np.asarray(anchor, dtype=float)
        n = self.n

        def fun(x):
            ll, g, H = self._eval(x)
            r = x - a
            return ll / n - 0.5 * lam * (r @ r), g / n - lam * r, H / n - lam * np.eye(x.size)

        x, *_ = newton_maximize(fun, a, tol=tol, max_iter=max_iter, bound=self.objective.bound)
        return x

    def minimizer(self):
        x, *_ = newton_maximize(
            lambda b: tuple(v / self.n for v in self._eval(b)),
            np.zeros(self.dim),
            bound=self.objective.bound,
        )
        return x

    def evaluate(self, theta):
        return self.value(theta)


def check_gradient(problem, theta, eps=1e-6) -> float:
    """Max relative error between ``problem.grad`` and central differences of ``problem.value``."""
    theta = np.asarray(theta, dtype=float)
    g = problem.grad(theta)
    fd = np.empty_like(g)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        fd[i] = (problem.value(theta + e) - problem.value(theta - e)) / (2 * eps)
    scale = np.maximum(np.abs(g), 1.0)
    return float(np.max(np.abs(g - fd) / scale))

