import numpy as np
import pytest

import config as scatterlab_config
from models import WeightSpec
from sampling import ScatterModel, TauDistribution, block_scatter, sample
from weights import make_weight


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale reproductions (run with -m slow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("-m"):
        return
    skip_slow = pytest.mark.skip(reason="slow; run with -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def student_weight():
    """u(t) = 1.1 / (0.1 + t) at c = 0.2."""
    return make_weight(WeightSpec(alpha=0.1), 0.2)


@pytest.fixture
def figure_model():
    """Factory for the reference-figure population scaled to (N, n)."""
    def build(N: int, n: int, tau: TauDistribution = None) -> ScatterModel:
        return ScatterModel(N=N, n=n, C=block_scatter(N, [1.0, 3.0, 10.0], [0.25, 0.25, 0.5]),
                            tau=tau or TauDistribution.gamma(0.5, 2.0))
    return build


@pytest.fixture
def small_sample(figure_model):
    return sample(figure_model(20, 100), 3)


@pytest.fixture
def identity_sample():
    model = ScatterModel(N=40, n=200, C=np.eye(40), tau=TauDistribution.constant())
    return sample(model, 11)


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    path = tmp_path / "results"
    monkeypatch.setattr(scatterlab_config.config, 'output_dir', str(path))
    return str(path)
