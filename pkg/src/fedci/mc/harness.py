"""Replicated experiments: run every pipeline on R datasets and summarise."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..dgp import LinearDgpSpec, SurvivalDgpSpec, gen_linear_sites, gen_survival_sites, replicate_seed, true_estimands
from ..errors import FedCIError
from ..runtime import ProtocolConfig
from .estimators import Pipelines, default_estimators, family_of, known_estimators
from .oracle import aj_predictions, aj_target, cox_predictions, estimate_site_bias, linear_predictions

__all__ = ["McConfig", "EmpiricalReport", "run_mc", "SCHEMA_VERSION", "fmt"]

SCHEMA_VERSION = 1
Z95 = 1.959963984540054


def fmt(x) -> str:
    """Fixed 12-significant-digit text for reports."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{float(x):.12g}"


def _round(x):
    x = float(x)
    return None if not math.isfinite(x) else float(f"{x:.12g}")


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo experiment.

    ``estimators=None`` runs the family's full set. ``grid``, ``cause`` and
    ``target`` (``"mixture"`` or ``"reference"``) apply to CIF experiments.
    ``oracle=True`` estimates the site biases needed for the survival
    predictions (``oracle_reps`` samples of ``oracle_n`` per site).
    """

    spec: object
    replicates: int = 200
    seed: int = 0
    estimators: tuple | None = None
    protocol: ProtocolConfig | None = None
    grid: tuple | None = None
    cause: int = 1
    target: str = "mixture"
    oracle: bool = True
    oracle_n: int = 100_000
    oracle_reps: int = 20
    kernel_bandwidth: float = 1.0
    distance_metric: str = "euclidean"
    topology: str = "ring"
    jobs: int = 1

    def __post_init__(self):
        if not isinstance(self.spec, (LinearDgpSpec, SurvivalDgpSpec)):
            raise TypeError("spec must be a LinearDgpSpec or SurvivalDgpSpec")
        if self.replicates < 2:
            raise ValueError("replicates must be at least 2")
        if self.oracle_n < 100_000:
            raise ValueError("oracle_n must be at least 1e5")
        if self.oracle_reps < 2:
            raise ValueError("oracle_reps must be at least 2")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.family == "aj" and not self.grid:
            raise ValueError("competing-risks experiments need a grid")
        if "p2p" in self.estimator_list and (self.protocol is None or self.protocol.eta is None):
            raise ValueError("the p2p estimator needs protocol.eta")
        known = known_estimators(self.family)
        for e in self.estimator_list:
            if e not in known:
                raise ValueError(f"unknown {self.family} estimator {e!r}; choose from {known}")

    @property
    def family(self):
        return family_of(self.spec)

    @property
    def estimator_list(self):
        return tuple(self.estimators) if self.estimators else default_estimators(self.family)


def _generate(cfg, r):
    seed = replicate_seed(cfg.seed, r)
    if cfg.family == "linear":
        return gen_linear_sites(cfg.spec, seed)
    return gen_survival_sites(cfg.spec, seed)


def _replicate(cfg, r):
    samples = _generate(cfg, r)
    pipes = Pipelines(cfg, samples)
    out = {}
    for name in cfg.estimator_list:
        try:
            est, var, log = pipes.run(name)
            out[name] = (np.asarray(est, dtype=float), np.asarray(var, dtype=float), log.to_dict() if (log and r == 0) else None, None)
        except (FedCIError, np.linalg.LinAlgError) as exc:
            out[name] = (None, None, None, f"{type(exc).__name__}: {exc}")
    return out


def _replicate_batch(args):
    cfg, indices = args
    return [_replicate(cfg, r) for r in indices]


# --------------------------------------------------------------------------


@dataclass
class EmpiricalReport:
    """Per-estimator Monte Carlo summaries plus attached predictions.

    ``samples[name]`` is ``(R, m)`` with NaN rows for failed replicates.
    Metrics use the successful replicates: ``variance`` has denominator R
    so that ``mse = bias^2 + variance`` holds exactly.
    """

    family: str
    truth: np.ndarray
    target: str
    components: list
    replicates: int
    seed: int
    samples: dict
    variances: dict
    failures: dict
    predictions: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    spec: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.samples:
            self.metrics[name] = self._summarise(name)

    def ok(self, name):
        x = self.samples[name]
        return x[~np.any(np.isnan(x), axis=1)]

    def _summarise(self, name):
        x = self.ok(name)
        R = x.shape[0]
        m = self.truth.size
        res = {"replicates": (np.full(m, R), np.zeros(m)), "failure_rate": (np.full(m, len(self.failures[name]) / self.replicates), np.zeros(m))}
        if R < 2:
            return res
        mean = x.mean(axis=0)
        sd = x.std(axis=0, ddof=1)
        cen = (x - mean) ** 2
        err2 = (x - self.truth) ** 2
        res["mean"] = (mean, sd / np.sqrt(R))
        res["bias"] = (mean - self.truth, sd / np.sqrt(R))
        res["variance"] = (cen.mean(axis=0), cen.std(axis=0, ddof=1) / np.sqrt(R))
        res["mse"] = (err2.mean(axis=0), err2.std(axis=0, ddof=1) / np.sqrt(R))
        v = self.variances[name][~np.any(np.isnan(self.samples[name]), axis=1)]
        if self.family == "linear" and np.all(np.isfinite(v)):
            cover = (np.abs(x - self.truth) <= Z95 * np.sqrt(v)).mean(axis=0)
            res["coverage"] = (cover, np.sqrt(cover * (1 - cover) / R))
        pred = self.predictions.get(name)
        if pred is not None:
            res["predicted_bias"] = (np.broadcast_to(np.asarray(pred.bias, dtype=float), (m,)).copy(), np.zeros(m))
            pv = np.asarray(pred.variance, dtype=float)
            pv = np.diag(pv) if pv.ndim == 2 else pv
            res["predicted_variance"] = (np.broadcast_to(pv, (m,)).copy(), np.zeros(m))
        return res

    def metric(self, name, metric, comp=0):
        """``(value, mc_se)`` of one component."""
        v, se = self.metrics[name][metric]
        return float(v[comp]), float(se[comp])

    def paired_variance_gap(self, a, b, comp=0):
        """``Var(a) - Var(b)`` over replicates where both succeeded, with its paired MC-SE."""
        xa, xb = self.samples[a][:, comp], self.samples[b][:, comp]
        keep = ~(np.isnan(xa) | np.isnan(xb))
        xa, xb = xa[keep], xb[keep]
        da = (xa - xa.mean()) ** 2
        db = (xb - xb.mean()) ** 2
        diff = da - db
        return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(diff.size))

    # ----------------------------------------------------------------- export

    def _metric_name(self, metric, comp):
        return metric if len(self.components) == 1 else f"{metric}[{self.components[comp]}]"

    def rows(self):
        out = []
        for name in self.samples:
            for metric, (vals, ses) in self.metrics[name].items():
                for c in range(len(vals)):
                    out.append([name, self._metric_name(metric, c), fmt(vals[c]), fmt(ses[c])])
        return out

    def to_dict(self):
        ests = {}
        for name in self.samples:
            ests[name] = {
                metric: {"value": [_round(v) for v in vals], "mc_se": [_round(s) for s in ses]}
                for metric, (vals, ses) in self.metrics[name].items()
            }
            ests[name]["failures"] = [{"replicate": r, "error": e} for r, e in self.failures[name]]
        preds = {k: p.to_dict() for k, p in self.predictions.items() if not k.startswith("_")}
        return {
            "schema_version": SCHEMA_VERSION,
            "family": self.family,
            "target": self.target,
            "truth": [_round(t) for t in self.truth],
            "components": [str(c) for c in self.components],
            "replicates": self.replicates,
            "seed": self.seed,
            "spec": self.spec,
            "estimators": ests,
            "predictions": _jsonable(preds),
            "communication": self.communication(),
        }

    def communication(self):
        """Rounds and scalars moved by each federated estimator (replicate 0); pooled oracles have none."""
        out = {}
        for name in self.samples:
            log = self.logs.get(name)
            if log is None:
                out[name] = None
                continue
            t = log["totals"]
            out[name] = {
                "rounds": int(t["rounds"]),
                "up": int(t["up"]),
                "down": int(t["down"]),
                "p2p": int(t["p2p"]),
                "scalars": int(t["up"] + t["down"] + t["p2p"]),
            }
        return out

    def write(self, out_dir, formats=("csv", "json")):
        import os

        paths = []
        if "csv" in formats:
            p = os.path.join(out_dir, "report.csv")
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["estimator", "metric", "value", "mc_se"])
                w.writerows(self.rows())
            paths.append(p)
            p = os.path.join(out_dir, "predictions.csv")
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["estimator", "component", "predicted_bias", "predicted_variance", "normalization"])
                for name, pred in self.predictions.items():
                    if name.startswith("_"):
                        continue
                    b = np.atleast_1d(np.asarray(pred.bias, dtype=float))
                    v = np.asarray(pred.variance, dtype=float)
                    v = np.atleast_1d(np.diag(v) if v.ndim == 2 else v)
                    m = max(b.size, v.size)
                    b = np.broadcast_to(b, (m,))
                    v = np.broadcast_to(v, (m,))
                    comps = self.components if m == len(self.components) else list(range(m))
                    for c in range(m):
                        w.writerow([name, comps[c], fmt(b[c]), fmt(v[c]), pred.normalization])
            paths.append(p)
        if "json" in formats:
            p = os.path.join(out_dir, "report.json")
            with open(p, "w") as fh:
                json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
                fh.write("\n")
            paths.append(p)
        return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        return _round(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# --------------------------------------------------------------------------


def _truth(cfg):
    spec = cfg.spec
    if cfg.family == "linear":
        return np.array([true_estimands(spec).tau]), ["ate"], "rho-mixture ATE"
    if cfg.family == "cox":
        return spec.beta.copy(), [f"beta{j + 1}" for j in range(spec.d)], "shared cause-1 coefficients"
    grid = np.asarray(cfg.grid, dtype=float)
    tgt = aj_target(spec, grid, cfg.target, cfg.cause, seed=cfg.seed)
    return tgt, [f"t={fmt(t)}" for t in grid], f"{cfg.target} CIF of cause {cfg.cause}"


def _predictions(cfg):
    spec = cfg.spec
    ests = cfg.estimator_list
    if cfg.family == "linear":
        return linear_predictions(spec, ests)
    if not cfg.oracle:
        return {}
    if cfg.family == "cox":
        biases = [estimate_site_bias(spec, k, cfg.oracle_n, reps=cfg.oracle_reps, seed=cfg.seed) for k in range(spec.K)]
        return cox_predictions(spec, ests, biases)
    grid = np.asarray(cfg.grid, dtype=float)
    tgt = aj_target(spec, grid, cfg.target, cfg.cause, seed=cfg.seed)
    biases = [
        estimate_site_bias(spec, k, cfg.oracle_n, target=tgt, reps=cfg.oracle_reps, seed=cfg.seed, grid=grid, cause=cfg.cause)
        for k in range(spec.K)
    ]
    truth = true_estimands(spec, grid, seed=cfg.seed)
    if truth.method == "closed_form":
        b = truth.site_cif[:, cfg.cause - 1] - tgt
        b_se = np.zeros_like(b)
    else:
        b = np.array([x.value for x in biases])
        b_se = np.array([x.se for x in biases])
    V = np.array([x.V for x in biases])
    return aj_predictions(spec, ests, grid, b, b_se, V)


def run_mc(cfg: McConfig) -> EmpiricalReport:
    """Run ``cfg.replicates`` replicates; deterministic given ``cfg.seed`` for any ``jobs``."""
    R = cfg.replicates
    if cfg.jobs == 1:
        results = [_replicate(cfg, r) for r in range(R)]
    else:
        chunks = [list(range(i, R, cfg.jobs)) for i in range(cfg.jobs)]
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            parts = list(ex.map(_replicate_batch, [(cfg, c) for c in chunks]))
        results = [None] * R
        for c, part in zip(chunks, parts):
            for r, res in zip(c, part):
                results[r] = res
    truth, comps, target = _truth(cfg)
    m = truth.size
    samples, variances, failures, logs = {}, {}, {}, {}
    for name in cfg.estimator_list:
        S = np.full((R, m), np.nan)
        V = np.full((R, m), np.nan)
        fails = []
        for r, res in enumerate(results):
            est, var, log, err = res[name]
            if err is not None:
                fails.append((r, err))
                continue
            S[r] = est
            V[r] = var
            if log is not None:
                logs[name] = log
        samples[name], variances[name], failures[name] = S, V, fails
    preds = _predictions(cfg)
    return EmpiricalReport(
        family=cfg.family,
        truth=truth,
        target=target,
        components=comps,
        replicates=R,
        seed=cfg.seed,
        samples=samples,
        variances=variances,
        failures=failures,
        predictions=preds,
        logs=logs,
        spec=_jsonable(cfg.spec.to_dict()),
    )
