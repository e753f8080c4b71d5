import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedci.dgp import CauseSpec, Hazard, LinearDgpSpec, SurvivalDgpSpec
from fedci.runtime import network

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def federation_contract(monkeypatch):
    """Every Network built during a test gets a tracker; no test may leave a cross-site read behind.

    Tests that provoke violations on purpose pass their own tracker.
    """
    made = []
    original = network.AccessTracker

    def tracked():
        t = original()
        made.append(t)
        return t

    monkeypatch.setattr(network, "AccessTracker", tracked)
    yield made
    for t in made:
        assert not t.cross_site_reads, f"cross-site row reads: {t.cross_site_reads}"


def linear_spec(sizes=(200, 200), p=(0.5, 0.5), means=None, d=2, theta1=None, theta0=None, sd=1.0, cov=None):
    K = len(sizes)
    means = np.zeros((K, d)) if means is None else np.asarray(means, dtype=float)
    theta1 = np.r_[1.0, np.linspace(1.0, -1.0, d)] if theta1 is None else theta1
    theta0 = np.r_[0.0, np.full(d, 0.5)] if theta0 is None else theta0
    cov = np.eye(d) if cov is None else cov
    return LinearDgpSpec(list(sizes), list(p), means, cov, theta1, theta0, sd)


def survival_spec(sizes=(300, 300), beta=(0.5, -0.5), rates=(1.0, 2.0), censoring=0.3, causes=None, horizon=np.inf):
    K = len(sizes)
    d = len(beta)
    if causes is None:
        causes = [CauseSpec(beta, [Hazard("constant", rate=r) for r in rates])]
    return SurvivalDgpSpec(list(sizes), np.zeros((K, d)), np.eye(d), causes, censoring, horizon)


@pytest.fixture
def lin_spec():
    return linear_spec()


@pytest.fixture
def surv_spec():
    return survival_spec()
