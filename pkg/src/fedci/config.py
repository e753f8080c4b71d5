"""Experiment configuration files.

A config is one YAML document with the sections ``scenario``, ``dgp``,
``estimators``, ``protocol``, ``mc`` and ``output``. Unknown keys are
rejected everywhere. Only the master seed and the output directory can be
overridden from the environment (``FEDCI_SEED``, ``FEDCI_OUT``) or the
command line; a config that ends up without a seed is an error.
"""
from __future__ import annotations

import math
import os
from importlib import resources
from typing import Annotated, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dgp import CauseSpec, Hazard, LinearDgpSpec, SurvivalDgpSpec
from .errors import ConfigError
from .mc import McConfig, Tolerances, known_estimators
from .mc.verdicts import _CLAIMS
from .runtime import ProtocolConfig

__all__ = [
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "bundled_scenarios",
    "scenario_path",
    "format_error_path",
]

Prob = Annotated[float, Field(gt=0.0, lt=1.0)]
PosInt = Annotated[int, Field(ge=1)]
NonNeg = Annotated[float, Field(ge=0.0)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LinearDgpConfig(_Strict):
    family: Literal["linear"]
    site_sizes: list[PosInt] = Field(min_length=1)
    propensities: list[Prob]
    covariate_means: list[list[float]]
    covariate_cov: Union[list[list[float]], list[list[list[float]]]]
    theta1: list[float]
    theta0: list[float]
    noise_sd: NonNeg = 1.0

    def build(self):
        return LinearDgpSpec(
            site_sizes=self.site_sizes,
            propensities=self.propensities,
            covariate_means=np.array(self.covariate_means, dtype=float),
            covariate_cov=np.array(self.covariate_cov, dtype=float),
            theta1=self.theta1,
            theta0=self.theta0,
            noise_sd=self.noise_sd,
        )


class HazardConfig(_Strict):
    kind: Literal["constant", "weibull"] = "constant"
    rate: NonNeg = 1.0
    shape: Annotated[float, Field(gt=0.0)] = 1.0
    scale: Annotated[float, Field(gt=0.0)] = 1.0


class CauseConfig(_Strict):
    beta: list[float]
    baselines: list[HazardConfig] = Field(min_length=1)


class SurvivalDgpConfig(_Strict):
    family: Literal["survival"]
    site_sizes: list[PosInt] = Field(min_length=1)
    covariate_means: list[list[float]]
    covariate_cov: Union[list[list[float]], list[list[list[float]]]]
    causes: list[CauseConfig] = Field(min_length=1)
    censoring_rate: Union[NonNeg, list[NonNeg]] = 0.0
    horizon: Annotated[float, Field(gt=0.0)] = math.inf

    def build(self):
        causes = [
            CauseSpec(beta=c.beta, baselines=[Hazard(**b.model_dump()) for b in c.baselines]) for c in self.causes
        ]
        return SurvivalDgpSpec(
            site_sizes=self.site_sizes,
            covariate_means=np.array(self.covariate_means, dtype=float),
            covariate_cov=np.array(self.covariate_cov, dtype=float),
            causes=causes,
            censoring_rate=self.censoring_rate,
            horizon=self.horizon,
        )


class EstimatorsConfig(_Strict):
    names: Optional[list[str]] = None
    kernel_bandwidth: Annotated[float, Field(gt=0.0)] = 1.0
    distance_metric: Literal["euclidean", "mahalanobis"] = "euclidean"


class ProtocolSection(_Strict):
    rounds: PosInt = 100
    lam: NonNeg = 1.0
    eta: Optional[Annotated[float, Field(gt=0.0)]] = None
    local_steps: PosInt = 1
    tol: Annotated[float, Field(gt=0.0)] = 1e-9
    max_local_iter: PosInt = 200
    step_decay: NonNeg = 0.0
    topology: Literal["ring", "complete", "star"] = "ring"

    def build(self):
        data = self.model_dump()
        data.pop("topology")
        return ProtocolConfig(**data)


class TolerancesConfig(_Strict):
    exact_abs: Annotated[float, Field(gt=0.0)] = 1e-8
    order_slack_se: NonNeg = 2.0
    equal_se: NonNeg = 2.0
    bias_gate_se: NonNeg = 3.0
    match_se: NonNeg = 2.0
    variance_rel: Annotated[float, Field(gt=0.0)] = 0.10


class McSection(_Strict):
    replicates: Annotated[int, Field(ge=2)] = 200
    seed: Optional[Annotated[int, Field(ge=0)]] = None
    jobs: PosInt = 1
    oracle: bool = True
    oracle_n: Annotated[int, Field(ge=100_000)] = 100_000
    oracle_reps: Annotated[int, Field(ge=2)] = 20
    grid: Optional[list[Annotated[float, Field(gt=0.0)]]] = None
    cause: PosInt = 1
    target: Literal["mixture", "reference"] = "mixture"
    claims: Optional[list[str]] = None
    tolerances: TolerancesConfig = TolerancesConfig()


class OutputSection(_Strict):
    dir: str = "out"
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"], min_length=1)
    dump_data: bool = False


class ExperimentConfig(_Strict):
    scenario: str
    description: str = ""
    dgp: Annotated[Union[LinearDgpConfig, SurvivalDgpConfig], Field(discriminator="family")]
    estimators: EstimatorsConfig = EstimatorsConfig()
    protocol: ProtocolSection = ProtocolSection()
    mc: McSection = McSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        K = len(self.dgp.site_sizes)
        if isinstance(self.dgp, LinearDgpConfig) and len(self.dgp.propensities) != K:
            raise ValueError(f"dgp.propensities must have one entry per site ({K})")
        if self.mc.claims is not None:
            for c in self.mc.claims:
                if c not in _CLAIMS:
                    raise ValueError(f"unknown claim {c!r}; choose from {sorted(_CLAIMS)}")
        return self

    # ------------------------------------------------------------------

    @property
    def family(self):
        if isinstance(self.dgp, LinearDgpConfig):
            return "linear"
        return "cox" if len(self.dgp.causes) == 1 else "aj"

    def spec(self):
        try:
            return self.dgp.build()
        except ValueError as exc:
            raise ConfigError(f"dgp: {exc}") from None

    def tolerances(self):
        return Tolerances(**self.mc.tolerances.model_dump())

    def mc_config(self, seed=None, jobs=None) -> McConfig:
        seed = self.mc.seed if seed is None else seed
        if seed is None:
            raise ConfigError("mc.seed: a master seed is required (set it in the config, FEDCI_SEED or --seed)")
        names = self.estimators.names
        try:
            return McConfig(
                spec=self.spec(),
                replicates=self.mc.replicates,
                seed=int(seed),
                estimators=tuple(names) if names else None,
                protocol=self.protocol.build(),
                grid=tuple(self.mc.grid) if self.mc.grid else None,
                cause=self.mc.cause,
                target=self.mc.target,
                oracle=self.mc.oracle,
                oracle_n=self.mc.oracle_n,
                oracle_reps=self.mc.oracle_reps,
                kernel_bandwidth=self.estimators.kernel_bandwidth,
                distance_metric=self.estimators.distance_metric,
                topology=self.protocol.topology,
                jobs=self.mc.jobs if jobs is None else int(jobs),
            )
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None


def format_error_path(loc) -> str:
    """``("dgp", "linear", "propensities", 0)`` -> ``dgp.propensities[0]``.

    Discriminator tags and union branch names inserted by pydantic are dropped.
    """
    out = ""
    for i, part in enumerate(loc):
        if isinstance(part, int):
            out += f"[{part}]"
            continue
        if i > 0 and loc[i - 1] == "dgp" and part in ("linear", "survival"):
            continue
        if "[" in part or part.startswith("function-"):
            continue
        out += f".{part}" if out else part
    return out


def parse_config(data: dict, seed=None, out=None) -> ExperimentConfig:
    """Validate a config mapping and apply overrides (explicit > environment > file)."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    env_seed = os.environ.get("FEDCI_SEED")
    env_out = os.environ.get("FEDCI_OUT")
    if seed is None and env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"FEDCI_SEED must be an integer, got {env_seed!r}") from None
    if out is None:
        out = env_out
    if seed is not None:
        data.setdefault("mc", {})
        data["mc"] = dict(data["mc"] or {}, seed=int(seed))
    if out is not None:
        data["output"] = dict(data.get("output") or {}, dir=str(out))
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            path = format_error_path(err["loc"])
            msgs.append(f"{path}: {err['msg']}" if path else err["msg"])
        raise ConfigError("; ".join(msgs)) from None


def load_config(path, seed=None, out=None) -> ExperimentConfig:
    """Read and validate a YAML config file or the name of a bundled scenario."""
    path = str(path)
    if not os.path.exists(path) and path in bundled_scenarios():
        path = scenario_path(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path!r}: {exc}") from None
    return parse_config(data, seed=seed, out=out)


def bundled_scenarios():
    root = resources.files("fedci") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def scenario_path(name):
    return str(resources.files("fedci") / "scenarios" / f"{name}.yaml")


def check_estimators(cfg: ExperimentConfig):
    """Unknown estimator names, reported with the config path."""
    names = cfg.estimators.names or []
    known = known_estimators(cfg.family)
    for i, n in enumerate(names):
        if n not in known:
            raise ConfigError(f"estimators.names[{i}]: unknown {cfg.family} estimator {n!r}; choose from {list(known)}")
