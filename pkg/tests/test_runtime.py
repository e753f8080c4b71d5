import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedci.access import AccessTracker, server_scope, site_scope
from fedci.aggregation import InverseVariance, Kernel, SampleSize
from fedci.dgp import SiteSample, concat_samples, gen_linear_sites, gen_survival_sites
from fedci.errors import FederationViolation, LocalSolverError, NonConvergence, StepSizeTooLarge, TopologyError
from fedci.linear import fit_arm_ols, local_ate
from fedci.runtime import (
    CoxObjective,
    LeastSquares,
    Network,
    ProtocolConfig,
    RoundLog,
    Topology,
    audit_communication,
    check_gradient,
    fed_cif,
    fed_cif_riskset,
    fed_cox,
    one_shot_ate,
    run_decomposition,
    run_fedprox,
    run_gd,
    run_meta,
    run_p2p,
    run_personalized,
)
from fedci.survival import aalen_johansen, fit_cox

from .conftest import linear_spec, survival_spec


def _pooled_params(sites):
    pooled = concat_samples(sites)
    return np.r_[fit_arm_ols(pooled, 1).params, fit_arm_ols(pooled, 0).params]


def _het_sites(seed=0, sizes=(150, 250, 200)):
    K = len(sizes)
    spec = linear_spec(sizes=sizes, p=np.linspace(0.3, 0.7, K), means=np.arange(2 * K).reshape(K, 2) / 3)
    return gen_linear_sites(spec, seed)


def _clone(sample, k):
    return SiteSample(k, sample.X, W=sample.W, Y=sample.Y)


# ---------------------------------------------------------------- federation contract


def test_server_cannot_read_rows():
    s = gen_linear_sites(linear_spec(), 0)[0]
    tracker = AccessTracker()
    with server_scope(tracker):
        with pytest.raises(FederationViolation):
            s.X
    assert tracker.cross_site_reads


def test_site_cannot_read_another_sites_rows():
    a, b = gen_linear_sites(linear_spec(), 0)
    net = Network([a, b], tracker=AccessTracker())

    def peek(ctx, _):
        return b.Y.sum()

    with server_scope(net.tracker):
        with pytest.raises(FederationViolation):
            net.exchange(peek, net.new_log("bad"))
    assert (a.site_id, b.site_id) in net.tracker.cross_site_reads


def test_site_reads_own_rows_and_unscoped_reads_are_free():
    s = gen_linear_sites(linear_spec(), 0)[0]
    with site_scope(s.site_id):
        s.X
    s.Y  # outside any scope: oracle code


def test_protocols_leave_no_cross_site_reads(federation_contract):
    sites = _het_sites()
    net = Network(sites)
    run_meta(net)
    one_shot_ate(net, "sw")
    run_gd(net, cfg=ProtocolConfig(rounds=5))
    run_fedprox(net, cfg=ProtocolConfig(rounds=5))
    run_personalized(net, cfg=ProtocolConfig(rounds=5, local_steps=2))
    run_p2p(net, LeastSquares(), Topology.ring(3), ProtocolConfig(rounds=5, eta=0.1))
    run_decomposition(net, ProtocolConfig(rounds=3), shared_dim=1)
    assert federation_contract and all(t.reads for t in federation_contract)


def test_messages_are_frozen():
    sites = _het_sites()
    net = Network(sites)
    ups = net.exchange(lambda ctx, _: np.ones(3), net.new_log("x"))
    with pytest.raises(ValueError):
        ups[0][0] = 5.0


# ---------------------------------------------------------------- meta and one-shot


def test_meta_round_accounting():
    net = Network(_het_sites())
    res = run_meta(net, SampleSize())
    assert res.log.total_rounds == 1
    assert audit_communication(res.log, "meta", d=2)
    expect = sum(r * local_ate(s).value for r, s in zip(net.rho, _het_sites()))
    assert res.value == pytest.approx(expect, abs=1e-12)
    # similarity weights also ship the covariate sums
    res = run_meta(net, Kernel(1.0))
    assert res.log.rounds[0].up == (4, 4, 4)


@pytest.mark.parametrize("mode", ["sw", "ivw"])
def test_one_shot_accounting(mode):
    res = one_shot_ate(Network(_het_sites()), mode)
    v = audit_communication(res.log, f"one_shot_{mode}", d=2)
    assert v, v.diff
    p = 3
    assert res.log.rounds[0].up[0] == (2 * p if mode == "sw" else 2 * (p * p + p))


def test_audit_catches_tampering():
    res = run_gd(Network(_het_sites()), cfg=ProtocolConfig(rounds=4, eta=0.1))
    assert audit_communication(res.log, "gd", d=2, T=4)
    log = RoundLog(res.log.protocol, res.log.site_ids, list(res.log.rounds), dict(res.log.meta))
    bad = log.rounds[2]
    log.rounds[2] = type(bad)(bad.index, bad.label, (bad.up[0] + 1,) + bad.up[1:], bad.down, bad.p2p)
    v = audit_communication(log, "gd", d=2, T=4)
    assert not v and v.first_bad_round == 3
    log.rounds.pop()
    v = audit_communication(log, "gd", d=2, T=4)
    assert not v and any(x["field"] == "rounds" for x in v.diff)


def test_roundlog_export(tmp_path):
    res = run_fedprox(Network(_het_sites()), cfg=ProtocolConfig(rounds=2))
    data = json.loads(res.log.to_json(tmp_path / "log.json"))
    assert data["total_rounds"] == 3 and len(data["rounds"][0]["up"]) == 3
    res.log.to_csv(tmp_path / "log.csv")
    assert len(open(tmp_path / "log.csv").read().splitlines()) == 1 + 3 * 3


# ---------------------------------------------------------------- gradient descent


def test_gd_stationary_at_pooled_minimizer():
    sites = _het_sites()
    theta = _pooled_params(sites)
    res = run_gd(Network(sites), cfg=ProtocolConfig(rounds=3, eta=0.1, init=tuple(theta)))
    np.testing.assert_allclose(res.params, theta, atol=1e-12)
    assert max(res.history["grad_norm"]) < 1e-10


def test_gd_with_small_sites_reaches_pooled_ols():
    # every site has fewer rows per arm than parameters; only the pooled design is full rank
    rng = np.random.default_rng(5)
    d = 4
    sites = []
    for k in range(6):
        X = rng.standard_normal((6, d))
        W = np.array([1, 1, 1, 0, 0, 0])
        Y = X @ rng.standard_normal(d) * 0 + X.sum(axis=1) + W + rng.standard_normal(6)
        sites.append(SiteSample(k, X, W=W, Y=Y))
    with pytest.raises(Exception):
        fit_arm_ols(sites[0], 1)
    res = run_gd(Network(sites), cfg=ProtocolConfig(rounds=500))
    assert np.max(np.abs(res.params - _pooled_params(sites))) < 1e-4


def test_gd_round_count_and_payload():
    T, d = 7, 2
    res = run_gd(Network(_het_sites()), cfg=ProtocolConfig(rounds=T, eta=0.05))
    assert res.log.total_rounds == T + 1
    assert res.log.rounds[0].up == (2 * (d + 1),) * 3
    assert audit_communication(res.log, "gd", d=d, T=T)
    auto = run_gd(Network(_het_sites()), cfg=ProtocolConfig(rounds=T))
    assert auto.log.rounds[0].up[0] == 2 * (d + 1) + 1
    assert audit_communication(auto.log, "gd", d=d, T=T)


def test_gd_divergence_detected():
    with pytest.raises(StepSizeTooLarge):
        run_gd(Network(_het_sites()), cfg=ProtocolConfig(rounds=100, eta=50.0))


def test_gd_replay_is_bit_identical():
    a = run_gd(Network(_het_sites(1)), cfg=ProtocolConfig(rounds=20))
    b = run_gd(Network(_het_sites(1)), cfg=ProtocolConfig(rounds=20))
    assert a.log.to_json() == b.log.to_json()
    assert np.array_equal(a.params, b.params)


# ---------------------------------------------------------------- FedProx


def test_fedprox_single_site_reaches_local_minimizer():
    s = _het_sites(sizes=(300,))
    res = run_fedprox(Network(s), cfg=ProtocolConfig(rounds=400, lam=1.0))
    assert np.max(np.abs(res.params - _pooled_params(s))) < 1e-6


def test_fedprox_identical_sites_equal_pooled_ols():
    # centred covariates: the per-round contraction lam / (lam + mu_min) is about 2/3
    base = gen_linear_sites(linear_spec(sizes=(300,), p=(0.5,)), 0)[0]
    sites = [_clone(base, k) for k in range(3)]
    res = run_fedprox(Network(sites), cfg=ProtocolConfig(rounds=50, lam=1.0))
    assert np.max(np.abs(res.params - _pooled_params(sites))) < 1e-6
    steps = res.history["step_norm"]
    # successive iterates contract, so the sequence is Cauchy
    assert all(b <= a for a, b in zip(steps, steps[1:])) and steps[-1] < 1e-6


def test_fedprox_lam_zero_repeats_the_average_of_local_fits():
    sites = _het_sites()
    net = Network(sites)
    res = run_fedprox(net, cfg=ProtocolConfig(rounds=4, lam=0.0))
    avg = sum(r * np.r_[fit_arm_ols(s, 1).params, fit_arm_ols(s, 0).params] for r, s in zip(net.rho, sites))
    np.testing.assert_allclose(res.params, avg, atol=1e-12)
    assert all(x < 1e-12 for x in res.history["step_norm"][1:])


def test_fedprox_local_failure_names_site_and_round():
    good = _het_sites(sizes=(100,))[0]
    X = np.ones((4, 2))
    bad = SiteSample("bad", X, W=[1, 1, 0, 0], Y=[1.0, 2.0, 3.0, 4.0])
    with pytest.raises(LocalSolverError) as info:
        run_fedprox(Network([good, bad]), cfg=ProtocolConfig(rounds=3, lam=0.0))
    assert info.value.site_id == "bad" and info.value.round_index == 1


def test_fedprox_cox_matches_pooled_cox():
    sites = gen_survival_sites(survival_spec(sizes=(300, 300), rates=(1.0, 1.0)), 3)
    res = run_fedprox(Network(sites), CoxObjective(), ProtocolConfig(rounds=60, lam=0.5))
    pooled = fit_cox(concat_samples(sites)).beta
    assert np.max(np.abs(res.params - pooled)) < 0.05
    assert audit_communication(res.log, "fedprox", d=2, T=60, param_dim=2)


# ---------------------------------------------------------------- personalized


def test_personalized_zero_local_steps():
    res = run_personalized(Network(_het_sites()), cfg=ProtocolConfig(rounds=3, local_steps=0))
    for p in res.site_params:
        np.testing.assert_array_equal(p, res.params)
    assert audit_communication(res.log, "personalized", d=2, T=3)


def test_personalized_identical_sites():
    base = _het_sites(sizes=(200,))[0]
    res = run_personalized(Network([_clone(base, k) for k in range(3)]), cfg=ProtocolConfig(rounds=2000, local_steps=3))
    for p in res.site_params:
        np.testing.assert_allclose(p, res.params, atol=1e-6)


def test_personalized_models_fit_their_sites_better():
    rng = np.random.default_rng(2)
    sites = []
    for k, shift in enumerate((-2.0, 0.0, 3.0)):
        X = rng.standard_normal((200, 2))
        W = rng.integers(0, 2, 200)
        sites.append(SiteSample(k, X, W=W, Y=shift + X @ [1.0, -1.0] + W + 0.1 * rng.standard_normal(200)))
    res = run_personalized(Network(sites), cfg=ProtocolConfig(rounds=300, local_steps=5))
    obj = LeastSquares()
    for s, p in zip(sites, res.site_params):
        prob = obj.bind(s)
        assert prob.value(p) < prob.value(res.params)


# ---------------------------------------------------------------- peer to peer


def test_topology_validation():
    with pytest.raises(TopologyError):
        Topology(4, [(0, 1), (2, 3)])
    with pytest.raises(TopologyError):
        Topology(2, [(0, 1)], [[0.5, 0.6], [0.5, 0.5]])
    with pytest.raises(TopologyError):
        Topology(3, [(0, 1), (1, 2)], [[0.5, 0.0, 0.5], [0.0, 0.5, 0.5], [0.5, 0.5, 0.0]])
    with pytest.raises(TopologyError):
        Topology.from_name("torus", 4)
    for name in ("ring", "complete", "star"):
        t = Topology.from_name(name, 5)
        assert t.doubly_stochastic and np.allclose(t.weights, t.weights.T)
        assert 0 < t.spectral_gap <= 1


def test_p2p_needs_step_size():
    with pytest.raises(ValueError):
        run_p2p(Network(_het_sites()), LeastSquares(), Topology.ring(3), ProtocolConfig())


@settings(max_examples=20)
@given(st.integers(0, 1000), st.integers(2, 6), st.sampled_from(["ring", "complete", "star"]))
def test_p2p_conserves_mean_without_gradient_steps(seed, K, name):
    rng = np.random.default_rng(seed)
    sites = _het_sites(seed, sizes=tuple(rng.integers(40, 80, K)))
    net = Network(sites)
    init = [rng.normal(size=6) for _ in range(K)]

    def start(ctx):
        ctx.state["x"] = init[ctx.index]

    net.local(start)
    topo = Topology.from_name(name, K)
    before = np.mean(init, axis=0)
    log = net.new_log("p2p")
    for t in range(25):
        net.gossip(
            lambda ctx: ctx.state["x"],
            lambda ctx, inbox: ctx.state.__setitem__("x", sum(topo.weights[ctx.index, j] * m for j, m in inbox.items())),
            topo,
            log,
        )
    after = np.mean(net.local(lambda ctx: ctx.state["x"]), axis=0)
    assert np.max(np.abs(after - before)) < 1e-12


def test_p2p_protocol_eta_zero_keeps_initial_mean():
    cfg = ProtocolConfig(rounds=10, eta=1e-300)  # eta must be positive; this is numerically zero
    res = run_p2p(Network(_het_sites()), LeastSquares(), Topology.ring(3), cfg)
    np.testing.assert_allclose(res.params, np.zeros(6), atol=1e-12)


def test_complete_graph_with_identical_sites_follows_gd():
    base = _het_sites(sizes=(200,))[0]
    sites = [_clone(base, k) for k in range(4)]
    cfg = ProtocolConfig(rounds=40, eta=0.2)
    p2p = run_p2p(Network(sites), LeastSquares(), Topology.complete(4), cfg)
    gd = run_gd(Network(sites), cfg=cfg)
    np.testing.assert_allclose(p2p.params, gd.params, atol=1e-12)
    for m in p2p.site_params:
        np.testing.assert_allclose(m, gd.params, atol=1e-12)


def _ring_sites():
    return gen_linear_sites(linear_spec(sizes=(150, 200, 250, 180, 220), p=(0.3, 0.4, 0.5, 0.6, 0.7)), 0)


def test_ring_reaches_consensus():
    # with eta_t = eta / (1 + t) the consensus gap shrinks like eta_T
    res = run_p2p(Network(_ring_sites()), LeastSquares(), Topology.ring(5), ProtocolConfig(rounds=2000, eta=0.3, step_decay=1.0))
    assert res.history["consensus_gap"][-1] < 1e-4


def test_ring_average_reaches_pooled_minimizer():
    # a slower decay keeps enough total step for the average to reach the pooled optimum
    sites = _ring_sites()
    res = run_p2p(Network(sites), LeastSquares(), Topology.ring(5), ProtocolConfig(rounds=2000, eta=0.3, step_decay=0.5))
    assert np.max(np.abs(res.params - _pooled_params(sites))) < 1e-3
    assert res.history["consensus_gap"][-1] < 1e-2


def test_p2p_accounting():
    res = run_p2p(Network(_het_sites()), LeastSquares(), Topology.star(3), ProtocolConfig(rounds=5, eta=0.1))
    assert audit_communication(res.log, "p2p", d=2, T=5, degrees=[2, 1, 1])
    assert res.log.totals()["up"] == 0


# ---------------------------------------------------------------- decomposition


def test_decomposition_large_penalty_keeps_shared_model():
    sites = _het_sites()
    F0 = np.eye(2)
    res = run_decomposition(Network(sites), ProtocolConfig(rounds=3, lam=1e8), shared_dim=2)
    np.testing.assert_allclose(res.params, F0, atol=1e-5)
    # heads carry the fit: each equals the site's per-arm OLS on the unchanged features
    for s, heads in zip(sites, res.site_params):
        c1, g1 = heads[0]
        np.testing.assert_allclose(np.r_[c1, g1], fit_arm_ols(s, 1).params, atol=1e-4)


def test_decomposition_with_fixed_heads_is_fedprox():
    sites = _het_sites()
    cfg = ProtocolConfig(rounds=15, lam=0.7)
    dec = run_decomposition(Network(sites), cfg, shared_dim=2, arms=False, train_heads=False)
    prox = run_fedprox(
        Network(sites), LeastSquares(arms=False, intercept=False), ProtocolConfig(rounds=15, lam=0.7, init=(1.0, 0.0))
    )
    np.testing.assert_allclose(dec.params[:, 0], prox.params, atol=1e-10)
    np.testing.assert_allclose(dec.params[:, 1], [0.0, 1.0], atol=1e-12)


def test_decomposition_identical_sites_share_heads():
    base = _het_sites(sizes=(300,))[0]
    res = run_decomposition(Network([_clone(base, k) for k in range(3)]), ProtocolConfig(rounds=30, lam=1.0), shared_dim=1)
    for heads in res.site_params[1:]:
        for (c, g), (c0, g0) in zip(heads, res.site_params[0]):
            assert abs(c - c0) < 1e-6 and np.max(np.abs(g - g0)) < 1e-6
    assert audit_communication(res.log, "decomposition", d=2, T=30, shared_dim=1)


def test_decomposition_argument_checks():
    net = Network(_het_sites())
    with pytest.raises(ValueError):
        run_decomposition(net, ProtocolConfig(), shared_dim=3)
    with pytest.raises(ValueError):
        run_decomposition(net, ProtocolConfig(lam=0.0), shared_dim=1)
    with pytest.raises(LocalSolverError) as info:
        run_decomposition(net, ProtocolConfig(rounds=2, max_local_iter=1, tol=-1.0), shared_dim=1)
    assert isinstance(info.value.cause, NonConvergence)


# ---------------------------------------------------------------- objectives and survival protocols


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.booleans())
def test_objective_gradients(seed, cox):
    rng = np.random.default_rng(seed)
    if cox:
        s = gen_survival_sites(survival_spec(sizes=(60,), rates=(1.0,)), seed)[0]
        prob = CoxObjective().bind(s)
        theta = rng.normal(scale=0.5, size=2)
    else:
        s = gen_linear_sites(linear_spec(sizes=(60,), p=(0.5,)), seed)[0]
        prob = LeastSquares().bind(s)
        theta = rng.normal(size=6)
    assert check_gradient(prob, theta) < 1e-5


def test_fed_cox_one_round():
    sites = gen_survival_sites(survival_spec(sizes=(400, 600)), 4)
    res = fed_cox(Network(sites))
    assert res.log.total_rounds == 1 and res.log.rounds[0].up == (2 + 4, 2 + 4)
    fits = [fit_cox(s) for s in sites]
    np.testing.assert_allclose(res.aggregate["fedavg"].value, 0.4 * fits[0].beta + 0.6 * fits[1].beta, atol=1e-10)
    with pytest.raises(ValueError):
        fed_cox(Network(sites), schemes=("median",))


def test_fed_cif_and_riskset():
    from fedci.dgp import CauseSpec, Hazard, SurvivalDgpSpec

    causes = [CauseSpec([0.0], [Hazard(rate=1.0)] * 2), CauseSpec([0.0], [Hazard(rate=0.5)] * 2)]
    spec = SurvivalDgpSpec([80, 120], np.zeros((2, 1)), np.eye(1), causes, 0.3)
    sites = gen_survival_sites(spec, 2)
    res = fed_cif_riskset(Network(sites))
    pooled = aalen_johansen(concat_samples(sites), 1)
    np.testing.assert_allclose(res.aggregate.curve.values, pooled.curve.values, atol=1e-14)
    out = fed_cif(Network(sites))
    assert set(out.aggregate) == {"sample_size", "inverse_variance", "random_effects"}
    assert out.log.total_rounds == 1
