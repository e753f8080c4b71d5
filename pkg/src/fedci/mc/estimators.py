"""Estimator pipelines run on every Monte Carlo replicate.

Each pipeline maps one replicate's site samples to ``(estimate, variance,
log)`` with arrays of the family's component count (1 for the linear ATE,
d for Cox coefficients, G grid times for a CIF). ``variance`` is NaN where
the estimator has no variance estimate. Pooled pipelines read every site's
rows and are oracles, never federated estimators.
"""
from __future__ import annotations

import numpy as np

from ..aggregation import Distance, InverseVariance, Kernel, RandomEffects, SampleSize
from ..dgp import LinearDgpSpec, concat_samples
from ..linear import local_ate
from ..runtime import (
    CoxObjective,
    LeastSquares,
    Network,
    ProtocolConfig,
    fed_cif,
    fed_cif_riskset,
    fed_cox,
    one_shot_ate,
    run_fedprox,
    run_gd,
    run_meta,
    run_p2p,
    Topology,
)
from ..survival import aalen_johansen, fit_cox_stratified

__all__ = ["LINEAR_ESTIMATORS", "COX_ESTIMATORS", "AJ_ESTIMATORS", "family_of", "known_estimators", "default_estimators", "Pipelines"]

LINEAR_ESTIMATORS = (
    "pool",
    "local0",
    "meta_sw",
    "meta_ivw",
    "meta_re",
    "kernel",
    "distance",
    "one_shot_sw",
    "one_shot_ivw",
    "gd",
    "fedprox",
    "p2p",
)
COX_ESTIMATORS = ("pooled", "fedprox", "fedavg", "meta_fixed", "meta_random", "fed_ivw")
AJ_ESTIMATORS = ("pooled", "riskset", "fedavg", "meta_ivw", "meta_random")

DEFAULT_PROTOCOLS = {
    "linear": ProtocolConfig(rounds=100, lam=1.0),
    "cox": ProtocolConfig(rounds=100, lam=1.0),
    "aj": ProtocolConfig(rounds=1),
}


def family_of(spec):
    if isinstance(spec, LinearDgpSpec):
        return "linear"
    return "cox" if spec.J == 1 else "aj"


def known_estimators(family):
    return {"linear": LINEAR_ESTIMATORS, "cox": COX_ESTIMATORS, "aj": AJ_ESTIMATORS}[family]


def default_estimators(family):
    # p2p has no coordinator to pick a step size, so it only runs when asked for
    return tuple(e for e in known_estimators(family) if e != "p2p")


def _scalar(value, variance=np.nan):
    return np.array([float(value)]), np.array([float(variance)])


class Pipelines:
    """Runs the configured estimators on one replicate, sharing work between them.

    ``run(name)`` returns ``(estimate, variance, log_or_None)``.
    """

    def __init__(self, cfg, samples):
        self.cfg = cfg
        self.samples = samples
        self.family = family_of(cfg.spec)
        self.protocol = cfg.protocol if cfg.protocol is not None else DEFAULT_PROTOCOLS[self.family]
        self._cache = {}

    def net(self):
        # a fresh network per protocol keeps site state from leaking between runs
        return Network(self.samples)

    def pooled(self):
        if "pooled" not in self._cache:
            self._cache["pooled"] = concat_samples(self.samples)
        return self._cache["pooled"]

    def run(self, name):
        fn = getattr(self, f"_{self.family}_{name}", None)
        if fn is None:
            raise ValueError(f"unknown {self.family} estimator {name!r}")
        return fn()

    # linear ---------------------------------------------------------------

    def _linear_pool(self):
        e = local_ate(self.pooled())
        return (*_scalar(e.value, e.variance), None)

    def _linear_local0(self):
        e = local_ate(self.samples[0])
        return (*_scalar(e.value, e.variance), None)

    def _meta(self, scheme):
        r = run_meta(self.net(), scheme)
        return (*_scalar(r.value, r.variance), r.log)

    def _linear_meta_sw(self):
        return self._meta(SampleSize())

    def _linear_meta_ivw(self):
        return self._meta(InverseVariance())

    def _linear_meta_re(self):
        return self._meta(RandomEffects())

    def _linear_kernel(self):
        return self._meta(Kernel(self.cfg.kernel_bandwidth))

    def _linear_distance(self):
        return self._meta(Distance(self.cfg.distance_metric))

    def _linear_one_shot_sw(self):
        r = one_shot_ate(self.net(), "sw")
        return (*_scalar(r.value), r.log)

    def _linear_one_shot_ivw(self):
        r = one_shot_ate(self.net(), "ivw")
        return (*_scalar(r.value), r.log)

    def _linear_gd(self):
        r = run_gd(self.net(), LeastSquares(), self.protocol)
        return (*_scalar(r.value), r.log)

    def _linear_fedprox(self):
        r = run_fedprox(self.net(), LeastSquares(), self.protocol)
        return (*_scalar(r.value), r.log)

    def _linear_p2p(self):
        topo = Topology.from_name(self.cfg.topology, len(self.samples))
        r = run_p2p(self.net(), LeastSquares(), topo, self.protocol)
        return (*_scalar(r.value), r.log)

    # Cox ------------------------------------------------------------------

    def _cox_pooled(self):
        f = fit_cox_stratified(self.samples)
        return f.beta, np.diag(np.linalg.inv(f.n * f.info)), None

    def _cox_fedprox(self):
        r = run_fedprox(self.net(), CoxObjective(), self.protocol)
        return r.params, np.full(r.params.shape, np.nan), r.log

    def _fed_cox(self):
        if "fed_cox" not in self._cache:
            self._cache["fed_cox"] = fed_cox(self.net())
        return self._cache["fed_cox"]

    def _cox_combined(self, key):
        r = self._fed_cox()
        agg = r.aggregate[key]
        return np.asarray(agg.value), np.diag(np.atleast_2d(agg.variance)), r.log

    def _cox_fedavg(self):
        return self._cox_combined("fedavg")

    def _cox_meta_fixed(self):
        return self._cox_combined("meta_fixed")

    def _cox_meta_random(self):
        return self._cox_combined("meta_random")

    def _cox_fed_ivw(self):
        return self._cox_combined("ivw")

    # Aalen-Johansen -------------------------------------------------------

    def _grid(self):
        return np.asarray(self.cfg.grid, dtype=float)

    def _aj_pooled(self):
        c = aalen_johansen(self.pooled(), self.cfg.cause).curve
        return c(self._grid()), c.variance_at(self._grid()), None

    def _aj_riskset(self):
        r = fed_cif_riskset(self.net(), self.cfg.cause)
        c = r.aggregate.curve
        return c(self._grid()), c.variance_at(self._grid()), r.log

    def _fed_cif(self):
        if "fed_cif" not in self._cache:
            self._cache["fed_cif"] = fed_cif(self.net(), cause=self.cfg.cause)
        return self._cache["fed_cif"]

    def _aj_combined(self, key):
        r = self._fed_cif()
        c = r.aggregate[key].curve
        return c(self._grid()), c.variance_at(self._grid()), r.log

    def _aj_fedavg(self):
        return self._aj_combined("sample_size")

    def _aj_meta_ivw(self):
        return self._aj_combined("inverse_variance")

    def _aj_meta_random(self):
        return self._aj_combined("random_effects")
