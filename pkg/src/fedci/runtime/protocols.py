"""Federated estimation protocols.

Every protocol takes a :class:`~fedci.runtime.network.Network`, runs its
server logic inside ``server_scope`` (so the coordinator can never touch
rows) and returns a :class:`FedResult` with the round log attached.

Payload conventions (scalars per site): sample sizes are enrolment
metadata and never counted; a parameter vector of length P costs P.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..access import server_scope
from ..aggregation import (
    AggregateEstimate,
    Distance,
    InverseVariance,
    Kernel,
    MomentSummary,
    RandomEffects,
    SampleSize,
    SiteValue,
    cif_aggregate,
    combine_with_weights,
    fed_cox_ivw,
    fed_cox_meta,
    federate_arm_params,
    meta_combine,
    reference_from_moments,
    similarity_weights,
)
from ..errors import NonConvergence, StepSizeTooLarge
from ..linear import fit_arm_ols, gram_summary, local_ate, model_ate
from ..survival import (
    CifEstimate,
    CoxFit,
    StepCurve,
    aalen_johansen,
    aalen_johansen_from_counts,
    count_table,
    fit_cox,
    merge_count_tables,
)
from .network import Network, RoundLog
from .objectives import LeastSquares, ProtocolConfig
from .topology import Topology

__all__ = [
    "FedResult",
    "run_meta",
    "one_shot_ate",
    "run_gd",
    "run_fedprox",
    "run_personalized",
    "run_p2p",
    "run_decomposition",
    "fed_cox",
    "fed_cif",
    "fed_cif_riskset",
    "DIVERGENCE_PATIENCE",
]

DIVERGENCE_PATIENCE = 5


@dataclass
class FedResult:
    """Output of a protocol run.

    ``params`` is the final global parameter (or None for one-round
    schemes), ``value`` the final scalar estimate when the protocol has
    one, ``site_params`` per-site models where the protocol keeps them.
    """

    params: object
    log: RoundLog
    value: float | None = None
    variance: float | None = None
    site_params: list | None = None
    aggregate: object = None
    history: dict = field(default_factory=dict)


def _weighted_sum(rho, vectors):
    # fixed-order fold for reproducible floating point
    out = np.zeros_like(np.asarray(vectors[0], dtype=float))
    for r, v in zip(rho, vectors):
        out = out + r * np.asarray(v, dtype=float)
    return out


def _bind(net: Network, objective):
    key = ("objective", objective)

    def bind(ctx):
        if key not in ctx.state:
            ctx.state[key] = objective.bind(ctx.sample)

    net.local(bind)
    return key


# --------------------------------------------------------------------------
# one-round and two-round estimators


def run_meta(net: Network, scheme=InverseVariance()) -> FedResult:
    """Each site sends its local ATE and variance once; the server combines.

    Kernel and Distance schemes additionally send covariate moment sums
    (``d`` values, plus ``d^2`` for the Mahalanobis metric).
    """
    log = net.new_log("meta")
    log.meta["scheme"] = scheme.tag
    similarity = isinstance(scheme, (Kernel, Distance))
    need_outer = isinstance(scheme, Distance) and scheme.metric == "mahalanobis"

    def site(ctx, _):
        est = local_ate(ctx.sample)
        msg = (est.value, est.variance)
        if similarity:
            m = MomentSummary.from_sample(ctx.sample)
            msg = msg + ((m.x_sum, m.x_outer) if need_outer else (m.x_sum,))
        return msg

    with server_scope(net.tracker):
        ups = net.exchange(site, log, label="local estimates")
        ests = [SiteValue(u[0], u[1], int(n), sid) for u, n, sid in zip(ups, net.n_k, net.site_ids)]
        if similarity:
            d = net.d
            moments = [
                MomentSummary(int(n), u[2], u[3] if need_outer else np.zeros((d, d)))
                for u, n in zip(ups, net.n_k)
            ]
            ref = reference_from_moments(moments)
            w = similarity_weights(moments, ref, scheme)
            agg = combine_with_weights(ests, w, scheme.tag)
        else:
            agg = meta_combine(ests, scheme)
    return FedResult(None, log, agg.value, agg.variance, aggregate=agg)


def one_shot_ate(net: Network, mode="ivw") -> FedResult:
    """Two-round one-shot estimator.

    Round 1 federates the arm models: ``"sw"`` sends each site's two OLS
    fits (``2(d+1)`` values) and averages them with weights ``n_k / n``;
    ``"ivw"`` sends the per-arm normal equations (``2((d+1)^2 + d+1)``)
    and solves their sum, which is the pooled OLS fit. Round 2 broadcasts
    the federated parameters and each site returns its model ATE; the
    estimate is their ``n_k / n`` weighted mean.
    """
    if mode not in ("sw", "ivw"):
        raise ValueError(f"unknown one-shot mode {mode!r}")
    log = net.new_log(f"one_shot_{mode}")

    def round1(ctx, _):
        if mode == "sw":
            m1, m0 = fit_arm_ols(ctx.sample, 1), fit_arm_ols(ctx.sample, 0)
            return (m1.params, m0.params)
        g = gram_summary(ctx.sample)
        return (g.gram, g.xty)

    def round2(ctx, theta):
        return model_ate(ctx.sample, theta[0], theta[1])

    with server_scope(net.tracker):
        ups = net.exchange(round1, log, label="arm models" if mode == "sw" else "normal equations")
        if mode == "sw":
            outputs = [(n, _Params(u[0]), _Params(u[1])) for n, u in zip(net.n_k, ups)]
        else:
            outputs = [_Gram(u[0], u[1]) for u in ups]
        theta1, theta0 = federate_arm_params(outputs, mode)
        vals = net.exchange(round2, log, down=(theta1, theta0), label="model ATE")
        value = float(_weighted_sum(net.rho, vals))
    return FedResult((theta1, theta0), log, value, float("nan"))


@dataclass(frozen=True)
class _Params:
    params: np.ndarray


@dataclass(frozen=True)
class _Gram:
    gram: np.ndarray
    xty: np.ndarray

    def __add__(self, other):
        return _Gram(self.gram + other.gram, self.xty + other.xty)


# --------------------------------------------------------------------------
# iterative protocols


def _check_divergence(history, name):
    norms = history
    if not np.isfinite(norms[-1]):
        raise StepSizeTooLarge(f"{name}: iterates became non-finite")
    if len(norms) > DIVERGENCE_PATIENCE and all(
        norms[-i] > norms[-i - 1] for i in range(1, DIVERGENCE_PATIENCE + 1)
    ):
        raise StepSizeTooLarge(
            f"{name}: gradient norm increased for {DIVERGENCE_PATIENCE} consecutive rounds; reduce eta"
        )


def run_gd(net: Network, objective=LeastSquares(), cfg: ProtocolConfig = ProtocolConfig()) -> FedResult:
    """Full-batch federated gradient descent on ``sum_k rho_k L_k``.

    T gradient rounds (down P, up P) followed by one evaluation round
    (down P, up 1). With ``cfg.eta=None`` each site also sends its
    curvature bound in round 1 and the server uses ``eta = 1 / sum rho_k L_k``.
    Divergence (gradient norm rising for 5 straight rounds) raises
    :class:`StepSizeTooLarge`.
    """
    log = net.new_log("gd")
    P = objective.dim(net.d)
    theta = cfg.initial(P)
    auto = cfg.eta is None
    eta = cfg.eta
    norms = []
    with server_scope(net.tracker):
        key = _bind(net, objective)
        for t in range(cfg.rounds):

            def site(ctx, th, first=(t == 0)):
                prob = ctx.state[key]
                g = prob.grad(th)
                return (g, prob.lipschitz()) if (auto and first) else g

            ups = net.exchange(site, log, down=theta, label=f"gradient {t + 1}", wrap=True)
            if auto and t == 0:
                eta = 1.0 / float(_weighted_sum(net.rho, [u[1] for u in ups]))
                ups = [u[0] for u in ups]
                log.meta["eta"] = eta
                log.meta["curvature_in_round_1"] = 1
            grad = _weighted_sum(net.rho, ups)
            norms.append(float(np.linalg.norm(grad)))
            _check_divergence(norms, "gd")
            theta = theta - eta * grad
        evals = net.exchange(lambda ctx, th: ctx.state[key].evaluate(th), log, down=theta, label="evaluate")
        value = float(_weighted_sum(net.rho, evals))
    return FedResult(theta, log, value, history={"grad_norm": norms, "eta": eta})


def run_fedprox(net: Network, objective=LeastSquares(), cfg: ProtocolConfig = ProtocolConfig()) -> FedResult:
    """``theta <- sum_k rho_k argmin { L_k + (lam/2) |theta - theta_prev|^2 }`` for T rounds.

    ``lam=0`` turns each round into an average of local minimisers. A final
    evaluation round (down P, up 1) reports the site model ATEs (least
    squares) or losses (Cox).
    """
    log = net.new_log("fedprox")
    P = objective.dim(net.d)
    theta = cfg.initial(P)
    lam = cfg.lam
    steps = []
    with server_scope(net.tracker):
        key = _bind(net, objective)

        def site(ctx, th):
            prob = ctx.state[key]
            return prob.prox(th, lam) if lam > 0 else prob.minimizer()

        for t in range(cfg.rounds):
            ups = net.exchange(site, log, down=theta, label=f"prox {t + 1}", wrap=True)
            new = _weighted_sum(net.rho, ups)
            steps.append(float(np.linalg.norm(new - theta)))
            theta = new
        evals = net.exchange(lambda ctx, th: ctx.state[key].evaluate(th), log, down=theta, label="evaluate")
        value = float(_weighted_sum(net.rho, evals))
    return FedResult(theta, log, value, history={"step_norm": steps})


def _local_steps(prob, theta, eta, M):
    x = np.array(theta, dtype=float)
    for _ in range(M):
        x = x - eta * prob.grad(x)
    return x


def run_personalized(net: Network, objective=LeastSquares(), cfg: ProtocolConfig = ProtocolConfig()) -> FedResult:
    """Broadcast, M local gradient steps per site, sample-size average; T rounds.

    After the last aggregation the global model is broadcast once more and
    each site's personalized model is M local steps from it (kept at the
    site; nothing is uploaded). With ``cfg.eta=None`` a site steps with
    its own ``1 / L_k``.
    """
    log = net.new_log("personalized")
    P = objective.dim(net.d)
    theta = cfg.initial(P)
    M = cfg.local_steps
    norms = []
    with server_scope(net.tracker):
        key = _bind(net, objective)

        def steps(ctx, th):
            prob = ctx.state[key]
            eta = cfg.eta if cfg.eta is not None else 1.0 / prob.lipschitz()
            return _local_steps(prob, th, eta, M)

        for t in range(cfg.rounds):
            ups = net.exchange(steps, log, down=theta, label=f"local steps {t + 1}", wrap=True)
            new = _weighted_sum(net.rho, ups)
            norms.append(float(np.linalg.norm(new - theta)))
            _check_divergence(norms, "personalized")
            theta = new

        def personalize(ctx, th):
            ctx.state["personalized"] = steps(ctx, th)

        net.exchange(personalize, log, down=theta, label="personalize", wrap=True)
        site_params = net.local(lambda ctx: ctx.state["personalized"])
    return FedResult(theta, log, site_params=site_params, history={"step_norm": norms})


def run_p2p(net: Network, objective, topology: Topology, cfg: ProtocolConfig) -> FedResult:
    """Decentralised gradient descent with neighbour averaging.

    Each round a site takes ``theta_k - eta_t K rho_k grad L_k(theta_k)``
    (the ``K rho_k`` factor makes the network average follow the pooled
    gradient), sends it to its neighbours and mixes
    ``theta_k <- sum_j w_kj theta_j``. ``eta_t = eta / (1 + t)^step_decay``.
    There is no coordinator, so ``cfg.eta`` must be given.
    """
    if cfg.eta is None:
        raise ValueError("peer-to-peer runs need an explicit step size eta")
    if topology.K != net.K:
        raise ValueError(f"topology has {topology.K} sites, network has {net.K}")
    log = net.new_log("p2p")
    log.meta["topology"] = topology.name
    P = objective.dim(net.d)
    init = cfg.initial(P)
    K = net.K
    W = topology.weights
    gaps = []
    with server_scope(net.tracker):
        key = _bind(net, objective)

        def start(ctx):
            ctx.state["p2p"] = init.copy()

        net.local(start)
        for t in range(cfg.rounds):
            eta_t = cfg.eta / (1.0 + t) ** cfg.step_decay

            def send(ctx):
                prob = ctx.state[key]
                th = ctx.state["p2p"]
                scale = K * ctx.n / net.n
                return th - eta_t * scale * prob.grad(th) if eta_t > 0 else th

            def receive(ctx, inbox):
                k = ctx.index
                ctx.state["p2p"] = _weighted_sum([W[k, j] for j in inbox], list(inbox.values()))

            net.gossip(send, receive, topology, log, label=f"gossip {t + 1}", wrap=True)
            models = net.local(lambda ctx: ctx.state["p2p"])
            gaps.append(_max_pairwise(models))
        models = net.local(lambda ctx: ctx.state["p2p"].copy())
        # readout by an observer, not a protocol round: each site scores its own model
        evals = net.local(lambda ctx: ctx.state[key].evaluate(ctx.state["p2p"]))
        value = float(_weighted_sum(net.rho, evals))
    mean = np.mean(models, axis=0)
    return FedResult(mean, log, value, site_params=models, history={"consensus_gap": gaps})


def _max_pairwise(models):
    M = np.asarray(models)
    diff = M[:, None, :] - M[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff**2, axis=-1))))


# --------------------------------------------------------------------------
# model decomposition


def _decomp_arms(sample, arms):
    X = np.asarray(sample.X, dtype=float)
    y = sample.Y
    if not arms:
        return [(X, y)]
    W = sample.W
    return [(X[W == a], y[W == a]) for a in (1, 0)]


def _decomp_objective(parts, F, heads, n):
    tot = 0.0
    for (X, y), (c, g) in zip(parts, heads):
        r = y - c - X @ F @ g
        tot += r @ r
    return tot / (2.0 * n)


def _fit_heads(parts, F):
    heads = []
    for X, y in parts:
        Z = np.column_stack([np.ones(X.shape[0]), X @ F])
        coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
        heads.append((float(coef[0]), coef[1:]))
    return heads


def _fit_shared(parts, heads, anchor, lam, n):
    d, r = anchor.shape
    A = lam * np.eye(d * r)
    rhs = lam * anchor.reshape(-1, order="F")
    for (X, y), (c, g) in zip(parts, heads):
        Z = np.kron(g[None, :], X)  # row i: kron(g, x_i), column-major vec(F)
        A += Z.T @ Z / n
        rhs += Z.T @ (y - c) / n
    return np.linalg.solve(A, rhs).reshape((d, r), order="F")


def run_decomposition(
    net: Network,
    cfg: ProtocolConfig,
    shared_dim: int,
    arms=True,
    train_heads=True,
    init=None,
) -> FedResult:
    """Shared linear encoder ``F`` (d x r) with private per-site, per-arm heads.

    A site models ``y ~ c_w + x' F g_w``. Each round it minimises its least
    squares loss plus ``(lam/2) |F - F_global|^2`` by alternating exact
    solves (heads given F, then F given heads) until the objective stops
    decreasing; the server averages the F's with weights ``n_k / n``.
    ``train_heads=False`` pins every head to ``c = 0, g = e_1``, which
    makes the F update a proximal least squares step on ``x' F e_1``.

    Returns ``params=F`` and ``site_params`` the heads, one list of
    ``(c, g)`` per site.
    """
    d = net.d
    r = int(shared_dim)
    if not 1 <= r <= d:
        raise ValueError(f"shared_dim must lie in 1..{d}")
    if cfg.lam <= 0:
        raise ValueError("decomposition needs lam > 0")
    log = net.new_log("decomposition")
    F = np.eye(d)[:, :r].copy() if init is None else np.array(init, dtype=float)
    if F.shape != (d, r):
        raise ValueError(f"init must be {d} x {r}")
    fixed = (0.0, np.eye(r)[0])
    steps = []

    def site(ctx, Fg):
        parts = ctx.state.get("decomp_parts")
        if parts is None:
            parts = ctx.state["decomp_parts"] = _decomp_arms(ctx.sample, arms)
        n = ctx.n
        Fk = np.array(Fg)
        heads = ctx.state.get("heads")
        if not train_heads:
            heads = [fixed] * len(parts)
        elif heads is None:
            heads = _fit_heads(parts, Fk)

        def total(F_, h_):
            return _decomp_objective(parts, F_, h_, n) + 0.5 * cfg.lam * np.sum((F_ - Fg) ** 2)

        prev = total(Fk, heads)
        for _ in range(cfg.max_local_iter):
            Fk = _fit_shared(parts, heads, Fg, cfg.lam, n)
            if train_heads:
                heads = _fit_heads(parts, Fk)
            cur = total(Fk, heads)
            if prev - cur <= cfg.tol * (1.0 + abs(cur)):
                break
            prev = cur
        else:
            raise NonConvergence(f"alternating solve did not settle in {cfg.max_local_iter} iterations")
        ctx.state["heads"] = heads
        return Fk

    with server_scope(net.tracker):
        for t in range(cfg.rounds):
            ups = net.exchange(site, log, down=F, label=f"shared model {t + 1}", wrap=True)
            new = _weighted_sum(net.rho, ups)
            steps.append(float(np.linalg.norm(new - F)))
            F = new
        heads = net.local(lambda ctx: ctx.state.get("heads", [fixed]))
    return FedResult(F, log, site_params=heads, history={"step_norm": steps})


# --------------------------------------------------------------------------
# survival


def fed_cox(net: Network, schemes=("fedavg", "meta_fixed", "meta_random", "ivw"), cause=None) -> FedResult:
    """One round: each site fits Cox and sends ``beta_k`` (d) and ``n_k H_k`` (d^2).

    ``aggregate`` maps each requested scheme to its
    :class:`~fedci.aggregation.AggregateEstimate`: ``fedavg`` is the
    ``n_k / n`` average of the local coefficients, ``meta_fixed`` and
    ``meta_random`` are coordinate-wise inverse-variance and random-effects
    meta-analysis, ``ivw`` is the information-weighted combination.
    """
    log = net.new_log("fed_cox")

    def site(ctx, _):
        f = fit_cox(ctx.sample, cause=cause)
        return (f.beta, f.n * f.info)

    with server_scope(net.tracker):
        ups = net.exchange(site, log, label="local Cox fits")
        fits = [CoxFit(u[0], u[1] / n, int(n), np.nan, True, 0) for u, n in zip(ups, net.n_k)]
        out = {}
        for s in schemes:
            if s == "fedavg":
                beta = _weighted_sum(net.rho, [f.beta for f in fits])
                covs = [np.linalg.inv(f.n * f.info) for f in fits]
                cov = _weighted_sum(net.rho**2, covs)
                out[s] = AggregateEstimate(beta, cov, net.rho.copy(), "sample_size", net.site_ids)
            elif s == "meta_fixed":
                out[s] = fed_cox_meta(fits, InverseVariance())
            elif s == "meta_random":
                out[s] = fed_cox_meta(fits, RandomEffects())
            elif s == "ivw":
                out[s] = fed_cox_ivw(fits)
            else:
                raise ValueError(f"unknown Cox combination {s!r}")
    return FedResult(None, log, aggregate=out, site_params=[f.beta for f in fits])


def fed_cif(net: Network, schemes=("sample_size", "inverse_variance", "random_effects"), cause=1, variance="aalen") -> FedResult:
    """One round: each site sends its Aalen-Johansen curve (times, values, variances).

    ``aggregate`` maps each scheme tag to the combined curve.
    """
    log = net.new_log("fed_cif")

    def site(ctx, _):
        c = aalen_johansen(ctx.sample, cause, variance).curve
        return (c.times, c.values, c.variances)

    table = {"sample_size": SampleSize(), "inverse_variance": InverseVariance(), "random_effects": RandomEffects()}
    with server_scope(net.tracker):
        ups = net.exchange(site, log, label="local CIF curves")
        curves = [CifEstimate(cause, StepCurve(*u), int(n)) for u, n in zip(ups, net.n_k)]
        out = {}
        for s in schemes:
            if s not in table:
                raise ValueError(f"unknown CIF combination {s!r}")
            out[s] = cif_aggregate(curves, table[s])
    return FedResult(None, log, aggregate=out, site_params=curves)


def fed_cif_riskset(net: Network, cause=1, variance="aalen") -> FedResult:
    """One round: each site sends its count table (distinct times, events per cause, censorings).

    The server merges the tables into the pooled risk sets, so the result
    equals the Aalen-Johansen estimate on the concatenated data. Payload is
    ``m_k (J + 2)`` scalars for ``m_k`` distinct times.
    """
    log = net.new_log("fed_cif_riskset")
    with server_scope(net.tracker):
        ups = net.exchange(lambda ctx, _: count_table(ctx.sample), log, label="count tables")
        est = aalen_johansen_from_counts(*merge_count_tables(ups), cause=cause, variance=variance)
    return FedResult(None, log, aggregate=est)
