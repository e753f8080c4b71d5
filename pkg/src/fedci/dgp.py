"""Synthetic multi-site data with controllable heterogeneity.

Two families are provided:

* linear outcome model per treatment arm, ``Y = c_w + X beta_w + eps``,
  with site-specific covariate means and treatment propensities;
* proportional-hazards survival data with site-specific baseline hazards
  (constant or Weibull), one or more competing causes, independent
  exponential censoring and an administrative horizon.

Covariates are Gaussian. Each site draws from its own random stream,
derived from ``(seed, site index)``, so site samples are reproducible and
independent of each other.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .access import check_access

__all__ = [
    "SiteSample",
    "LinearDgpSpec",
    "Hazard",
    "CauseSpec",
    "SurvivalDgpSpec",
    "TruthRecord",
    "site_rng",
    "replicate_seed",
    "gen_linear_site",
    "gen_linear_sites",
    "gen_cox_site",
    "gen_competing_risks_site",
    "gen_survival_sites",
    "draw_event_times",
    "true_estimands",
    "concat_samples",
    "write_samples_csv",
]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class SiteSample:
    """Individual-level records held by one site.

    Row arrays (``X``, ``W``, ``Y``, ``T``, ``delta``) are guarded: reading
    them from another site's scope or from the server scope raises
    :class:`~fedci.errors.FederationViolation`. ``site_id``, ``n``, ``d``
    and ``n_causes`` are enrolment metadata and are always readable.
    """

    __slots__ = ("site_id", "n", "d", "kind", "n_causes", "_X", "_W", "_Y", "_T", "_delta")

    def __init__(self, site_id, X, W=None, Y=None, T=None, delta=None, n_causes=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        n = X.shape[0]
        if T is None:
            if W is None or Y is None:
                raise ValueError("a linear sample needs W and Y")
            W = np.asarray(W).astype(np.int8)
            Y = np.asarray(Y, dtype=float)
            if W.shape != (n,) or Y.shape != (n,):
                raise ValueError("X, W and Y must have the same number of rows")
            if np.any((W != 0) & (W != 1)):
                raise ValueError("treatment indicators must be 0 or 1")
            self.kind = "linear"
            self.n_causes = 0
        else:
            T = np.asarray(T, dtype=float)
            delta = np.asarray(delta).astype(np.int64)
            if T.shape != (n,) or delta.shape != (n,):
                raise ValueError("X, T and delta must have the same number of rows")
            if np.any(T < 0) or not np.all(np.isfinite(T)):
                raise ValueError("observed times must be finite and nonnegative")
            if n_causes is None:
                n_causes = int(delta.max(initial=0)) or 1
            if np.any(delta < 0) or np.any(delta > n_causes):
                raise ValueError(f"event types must lie in 0..{n_causes}")
            self.kind = "survival"
            self.n_causes = int(n_causes)
        self.site_id = site_id
        self.n = n
        self.d = X.shape[1]
        self._X = _frozen(X)
        self._W = None if W is None else _frozen(W, np.int8)
        self._Y = None if Y is None else _frozen(Y)
        self._T = None if T is None else _frozen(T)
        self._delta = None if delta is None else _frozen(delta, np.int64)

    @property
    def X(self):
        check_access(self.site_id)
        return self._X

    @property
    def W(self):
        check_access(self.site_id)
        return self._W

    @property
    def Y(self):
        check_access(self.site_id)
        return self._Y

    @property
    def T(self):
        check_access(self.site_id)
        return self._T

    @property
    def delta(self):
        check_access(self.site_id)
        return self._delta

    def __repr__(self):
        return f"SiteSample(site_id={self.site_id!r}, kind={self.kind!r}, n={self.n}, d={self.d})"


# --------------------------------------------------------------------------
# seeds


def site_rng(seed: int, k: int) -> np.random.Generator:
    """Random stream for site ``k`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(k),)))


def replicate_seed(master: int, r: int) -> int:
    """Seed of Monte Carlo replicate ``r``; counter-based, order independent."""
    ss = np.random.SeedSequence(int(master), spawn_key=(2**31 + int(r),))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# linear family


def _check_cov(cov, K, d, name):
    cov = np.asarray(cov, dtype=float)
    if cov.shape == (d, d):
        mats = [cov]
    elif cov.shape == (K, d, d):
        mats = list(cov)
    else:
        raise ValueError(f"{name} must have shape ({d}, {d}) or ({K}, {d}, {d}), got {cov.shape}")
    chols = []
    for m in mats:
        if not np.allclose(m, m.T, atol=1e-12):
            raise ValueError(f"{name} must be symmetric")
        if d and np.linalg.eigvalsh(m).min() <= 0:
            raise ValueError(f"{name} must be positive definite")
        chols.append(np.linalg.cholesky(m) if d else np.zeros((0, 0)))
    if len(chols) == 1:
        chols = chols * K
    return cov, chols


def _check_sizes(site_sizes):
    sizes = np.asarray(site_sizes)
    if sizes.ndim != 1 or sizes.size == 0:
        raise ValueError("site_sizes must be a nonempty list")
    for i, s in enumerate(sizes):
        if int(s) != s or s < 1:
            raise ValueError(f"site_sizes[{i}] must be a positive integer")
    return tuple(int(s) for s in sizes)


def _check_means(covariate_means, K):
    means = np.asarray(covariate_means, dtype=float)
    if means.ndim == 1 and K == 1:
        means = means.reshape(1, -1)
    if means.ndim != 2 or means.shape[0] != K:
        raise ValueError(f"covariate_means must have one row per site ({K})")
    return means


@dataclass
class LinearDgpSpec:
    """Multi-site linear outcome model.

    ``theta1`` and ``theta0`` are ``(intercept, beta...)`` of length d+1.
    ``covariate_cov`` is shared (d x d) or per site (K x d x d).
    """

    site_sizes: Sequence[int]
    propensities: Sequence[float]
    covariate_means: np.ndarray
    covariate_cov: np.ndarray
    theta1: np.ndarray
    theta0: np.ndarray
    noise_sd: float = 1.0
    _chol: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.site_sizes = _check_sizes(self.site_sizes)
        K = len(self.site_sizes)
        p = np.asarray(self.propensities, dtype=float)
        if p.shape != (K,):
            raise ValueError(f"propensities must have {K} entries")
        for i, pk in enumerate(p):
            if not 0.0 < pk < 1.0:
                raise ValueError(f"propensities[{i}] must lie in (0, 1), got {pk}")
        self.propensities = p
        self.covariate_means = _check_means(self.covariate_means, K)
        d = self.covariate_means.shape[1]
        self.covariate_cov, self._chol = _check_cov(self.covariate_cov, K, d, "covariate_cov")
        for name in ("theta1", "theta0"):
            th = np.asarray(getattr(self, name), dtype=float)
            if th.shape != (d + 1,):
                raise ValueError(f"{name} must have length d+1 = {d + 1}")
            setattr(self, name, th)
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be nonnegative")
        self.noise_sd = float(self.noise_sd)

    @property
    def K(self):
        return len(self.site_sizes)

    @property
    def d(self):
        return self.covariate_means.shape[1]

    @property
    def n(self):
        return sum(self.site_sizes)

    @property
    def rho(self):
        return np.asarray(self.site_sizes, dtype=float) / self.n

    @property
    def pooled_propensity(self):
        return float(self.rho @ self.propensities)

    def site_cov(self, k):
        cov = self.covariate_cov
        return cov if cov.ndim == 2 else cov[k]

    def to_dict(self):
        return {
            "site_sizes": list(self.site_sizes),
            "propensities": self.propensities.tolist(),
            "covariate_means": self.covariate_means.tolist(),
            "covariate_cov": np.asarray(self.covariate_cov).tolist(),
            "theta1": self.theta1.tolist(),
            "theta0": self.theta0.tolist(),
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _gaussian(rng, n, mean, chol):
    d = mean.shape[0]
    if d == 0:
        return np.zeros((n, 0))
    return mean + rng.standard_normal((n, d)) @ chol.T


def gen_linear_site(spec: LinearDgpSpec, k: int, seed: int) -> SiteSample:
    """Draw site ``k``: ``X ~ N(mu_k, Sigma)``, ``W ~ Bern(p_k)``, linear outcome."""
    if not 0 <= k < spec.K:
        raise IndexError(f"site index {k} outside 0..{spec.K - 1}")
    rng = site_rng(seed, k)
    n = spec.site_sizes[k]
    X = _gaussian(rng, n, spec.covariate_means[k], spec._chol[k])
    W = (rng.random(n) < spec.propensities[k]).astype(np.int8)
    design = np.column_stack([np.ones(n), X])
    mean = np.where(W == 1, design @ spec.theta1, design @ spec.theta0)
    Y = mean + spec.noise_sd * rng.standard_normal(n)
    return SiteSample(k, X, W=W, Y=Y)


def gen_linear_sites(spec: LinearDgpSpec, seed: int) -> list[SiteSample]:
    return [gen_linear_site(spec, k, seed) for k in range(spec.K)]


# --------------------------------------------------------------------------
# survival family


@dataclass(frozen=True)
class Hazard:
    """Baseline hazard: ``constant`` (H(t) = rate t) or ``weibull`` (H(t) = (t/scale)^shape)."""

    kind: str = "constant"
    rate: float = 1.0
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind == "constant":
            # rate 0 is allowed: the cause never occurs
            if not self.rate >= 0:
                raise ValueError("constant hazard rate must be nonnegative")
        elif self.kind == "weibull":
            if not (self.shape > 0 and self.scale > 0):
                raise ValueError("weibull shape and scale must be positive")
        else:
            raise ValueError(f"unknown hazard kind {self.kind!r}")

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return self.rate * t
        return (t / self.scale) ** self.shape

    def inverse(self, h):
        h = np.asarray(h, dtype=float)
        if self.kind == "constant":
            if self.rate == 0:
                return np.full(h.shape, np.inf)
            return h / self.rate
        return self.scale * h ** (1.0 / self.shape)

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "rate": self.rate}
        return {"kind": "weibull", "shape": self.shape, "scale": self.scale}


@dataclass
class CauseSpec:
    """One cause-specific hazard: ``h_jk(t | x) = h0_jk(t) exp(x beta_j)``."""

    beta: np.ndarray
    baselines: Sequence[Hazard]

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.baselines = tuple(b if isinstance(b, Hazard) else Hazard(**b) for b in self.baselines)


@dataclass
class SurvivalDgpSpec:
    """Multi-site proportional hazards model with J >= 1 competing causes.

    ``censoring_rate`` is a scalar or one rate per site (0 disables random
    censoring); ``horizon`` truncates follow-up (``inf`` disables it).
    """

    site_sizes: Sequence[int]
    covariate_means: np.ndarray
    covariate_cov: np.ndarray
    causes: Sequence[CauseSpec]
    censoring_rate: float | Sequence[float] = 0.0
    horizon: float = math.inf
    _chol: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.site_sizes = _check_sizes(self.site_sizes)
        K = len(self.site_sizes)
        self.covariate_means = _check_means(self.covariate_means, K)
        d = self.covariate_means.shape[1]
        self.covariate_cov, self._chol = _check_cov(self.covariate_cov, K, d, "covariate_cov")
        causes = [c if isinstance(c, CauseSpec) else CauseSpec(**c) for c in self.causes]
        if not causes:
            raise ValueError("at least one cause is required")
        for j, c in enumerate(causes):
            if c.beta.shape != (d,):
                raise ValueError(f"causes[{j}].beta must have length {d}")
            if len(c.baselines) != K:
                raise ValueError(f"causes[{j}].baselines must have one hazard per site")
        self.causes = tuple(causes)
        rates = np.broadcast_to(np.asarray(self.censoring_rate, dtype=float), (K,))
        if np.any(~(rates >= 0)):
            raise ValueError("censoring_rate must be nonnegative")
        self.censoring_rate = rates.copy()
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        self.horizon = float(self.horizon)

    @property
    def K(self):
        return len(self.site_sizes)

    @property
    def d(self):
        return self.covariate_means.shape[1]

    @property
    def J(self):
        return len(self.causes)

    @property
    def n(self):
        return sum(self.site_sizes)

    @property
    def rho(self):
        return np.asarray(self.site_sizes, dtype=float) / self.n

    @property
    def beta(self):
        """Coefficients of cause 1, the Cox target."""
        return self.causes[0].beta

    def to_dict(self):
        return {
            "site_sizes": list(self.site_sizes),
            "covariate_means": self.covariate_means.tolist(),
            "covariate_cov": np.asarray(self.covariate_cov).tolist(),
            "causes": [
                {"beta": c.beta.tolist(), "baselines": [b.to_dict() for b in c.baselines]}
                for c in self.causes
            ],
            "censoring_rate": self.censoring_rate.tolist(),
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["causes"] = [CauseSpec(**c) for c in data["causes"]]
        return cls(**data)


def draw_event_times(hazard: Hazard, linpred, rng):
    """Inverse-transform draw from ``S(t | x) = exp(-H0(t) exp(linpred))``."""
    linpred = np.asarray(linpred, dtype=float)
    e = rng.standard_exponential(linpred.shape)
    return hazard.inverse(e * np.exp(-linpred))


def _latent_times(spec: SurvivalDgpSpec, k, X, rng):
    n = X.shape[0]
    times = np.empty((spec.J, n))
    for j, cause in enumerate(spec.causes):
        times[j] = draw_event_times(cause.baselines[k], X @ cause.beta, rng)
    first = np.argmin(times, axis=0)
    return times[first, np.arange(n)], first + 1


def _gen_survival(spec: SurvivalDgpSpec, k, seed):
    if not 0 <= k < spec.K:
        raise IndexError(f"site index {k} outside 0..{spec.K - 1}")
    rng = site_rng(seed, k)
    n = spec.site_sizes[k]
    X = _gaussian(rng, n, spec.covariate_means[k], spec._chol[k])
    latent, cause = _latent_times(spec, k, X, rng)
    rate = spec.censoring_rate[k]
    if rate > 0:
        cens = rng.standard_exponential(n) / rate
    else:
        cens = np.full(n, np.inf)
    observed = np.minimum(np.minimum(latent, cens), spec.horizon)
    event = (latent <= cens) & (latent <= spec.horizon)
    if not np.all(np.isfinite(observed)):
        raise ValueError("infinite follow-up: every cause rate is 0 with no censoring or horizon")
    delta = np.where(event, cause, 0)
    return SiteSample(k, X, T=observed, delta=delta, n_causes=spec.J)


def gen_cox_site(spec: SurvivalDgpSpec, k: int, seed: int) -> SiteSample:
    """Single-cause proportional hazards sample for site ``k``."""
    if spec.J != 1:
        raise ValueError("gen_cox_site needs a single-cause spec; use gen_competing_risks_site")
    return _gen_survival(spec, k, seed)


def gen_competing_risks_site(spec: SurvivalDgpSpec, k: int, seed: int) -> SiteSample:
    """Competing risks sample: the earliest latent cause-specific time is observed."""
    if spec.J < 2:
        raise ValueError("competing risks need at least two causes")
    return _gen_survival(spec, k, seed)


def gen_survival_sites(spec: SurvivalDgpSpec, seed: int) -> list[SiteSample]:
    return [_gen_survival(spec, k, seed) for k in range(spec.K)]


# --------------------------------------------------------------------------
# truths


@dataclass
class TruthRecord:
    tau: float | None = None
    site_tau: np.ndarray | None = None
    beta: np.ndarray | None = None
    grid: np.ndarray | None = None
    cif: np.ndarray | None = None  # (J, G) rho-mixture
    site_cif: np.ndarray | None = None  # (K, J, G)
    method: str = "closed_form"


def _closed_form_site_cif(spec, k, grid):
    rates = np.array([c.baselines[k].rate for c in spec.causes])
    total = rates.sum()
    if total == 0:
        return np.zeros((spec.J, grid.size))
    return np.outer(rates / total, 1.0 - np.exp(-total * grid))


def _empirical_site_cif(spec, k, grid, oracle_n, seed):
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(k, 77)))
    X = _gaussian(rng, oracle_n, spec.covariate_means[k], spec._chol[k])
    latent, cause = _latent_times(spec, k, X, rng)
    out = np.empty((spec.J, grid.size))
    for j in range(spec.J):
        t = np.sort(latent[cause == j + 1])
        out[j] = np.searchsorted(t, grid, side="right") / oracle_n
    return out


def true_estimands(spec, grid=None, oracle_n: int = 10**6, seed: int = 0) -> TruthRecord:
    """Population targets of a spec.

    Linear: ``tau = sum_k rho_k (1, mu_k) (theta1 - theta0)``.
    Survival: the cause-1 coefficients and each cause's CIF on ``grid``,
    in closed form when every baseline is constant and covariates do not
    enter the hazards, otherwise from ``oracle_n`` latent draws per site.
    """
    if isinstance(spec, LinearDgpSpec):
        diff = spec.theta1 - spec.theta0
        site_tau = diff[0] + spec.covariate_means @ diff[1:]
        return TruthRecord(tau=float(spec.rho @ site_tau), site_tau=site_tau)
    if not isinstance(spec, SurvivalDgpSpec):
        raise TypeError(f"unsupported spec type {type(spec).__name__}")
    rec = TruthRecord(beta=spec.beta.copy())
    if grid is None:
        return rec
    grid = np.asarray(grid, dtype=float)
    closed = all(b.kind == "constant" for c in spec.causes for b in c.baselines) and all(
        not np.any(c.beta) for c in spec.causes
    )
    site_cif = np.empty((spec.K, spec.J, grid.size))
    for k in range(spec.K):
        if closed:
            site_cif[k] = _closed_form_site_cif(spec, k, grid)
        else:
            site_cif[k] = _empirical_site_cif(spec, k, grid, oracle_n, seed)
    rec.grid = grid
    rec.site_cif = site_cif
    rec.cif = np.tensordot(spec.rho, site_cif, axes=1)
    rec.method = "closed_form" if closed else "empirical"
    return rec


# --------------------------------------------------------------------------
# pooling and export (never used inside a federated run)


def concat_samples(samples: Sequence[SiteSample], site_id="pooled") -> SiteSample:
    """Stack several samples into one. Reads every site's rows."""
    kind = samples[0].kind
    X = np.vstack([s.X for s in samples])
    if kind == "linear":
        return SiteSample(
            site_id,
            X,
            W=np.concatenate([s.W for s in samples]),
            Y=np.concatenate([s.Y for s in samples]),
        )
    return SiteSample(
        site_id,
        X,
        T=np.concatenate([s.T for s in samples]),
        delta=np.concatenate([s.delta for s in samples]),
        n_causes=max(s.n_causes for s in samples),
    )


def write_samples_csv(samples: Sequence[SiteSample], path):
    """One row per subject: ``site, x1..xd, w, y`` or ``site, x1..xd, t, delta``."""
    d = samples[0].d
    kind = samples[0].kind
    tail = ["w", "y"] if kind == "linear" else ["t", "delta"]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["site"] + [f"x{i + 1}" for i in range(d)] + tail)
        for s in samples:
            a, b = (s.W, s.Y) if kind == "linear" else (s.T, s.delta)
            for row, u, v in zip(s.X, a, b):
                out.writerow(
                    [s.site_id]
                    + [f"{x:.12g}" for x in row]
                    + [str(int(u)) if kind == "linear" else f"{u:.12g}",
                       f"{v:.12g}" if kind == "linear" else str(int(v))]
                )
