import numpy as np
import pytest

from tube_nmpc.config import load_params
from tube_nmpc.model import FeedstockSpec, KineticParams, ReactorConfig


@pytest.fixture(scope="session")
def default_model():
    """Packaged three-feedstock digester: (ReactorConfig, KineticParams)."""
    return load_params()


@pytest.fixture(scope="session")
def cfg(default_model):
    return default_model[0]


@pytest.fixture(scope="session")
def params(default_model):
    return default_model[1]


@pytest.fixture(scope="session")
def phase1_flows():
    """Reference diet of the preset scenarios, phase 1 (L/d)."""
    return np.array([0.1253, 0.1636, 0.0773])


@pytest.fixture(scope="session")
def steady_state(cfg, params, phase1_flows):
    """Settled state under the phase-1 diet (long nominal simulation)."""
    from tube_nmpc.harness import equilibrate

    return equilibrate(cfg, params, phase1_flows)


@pytest.fixture
def single_feed_cfg():
    """Minimal one-feedstock reactor for hand-checkable balances."""
    theta = np.array([10.0, 0.0, 0.0, 5.0, 40.0, 60.0, 100.0])
    return ReactorConfig(volume=10.0,
                         feedstocks=[FeedstockSpec("only", theta, True)])


@pytest.fixture
def simple_params():
    return KineticParams(mu_max1=1.2, mu_max2=0.74, ks1=7.1, ks2=9.28,
                         ki2=16.0, k_hyd=[0.5], k1=42.14, k2=116.5, k3=268.0,
                         k4=50.6, k5=343.6, k6=453.0, kla=19.8, kh_pc=46.0)
