from pathlib import Path

import pytest

from app.config import Settings
from app.pipeline import Experiment
from app.toyworld import default_benchmark_domains, render_pair

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


@pytest.fixture(scope="session")
def smoke_config():
    return str(SMOKE_CONFIG)


@pytest.fixture(scope="session")
def tiny_settings(tmp_path_factory):
    """Smoke-sized settings writing into a session temp dir"""
    root = tmp_path_factory.mktemp("runs")
    return Settings.load(str(SMOKE_CONFIG), {"output_root": str(root)})


@pytest.fixture(scope="session")
def experiment(tiny_settings):
    return Experiment(tiny_settings)


@pytest.fixture(scope="session")
def tiny_codec(experiment):
    return experiment.codec()


@pytest.fixture(scope="session")
def tiny_bundle(experiment):
    """Codec, generator and scorer trained on the smoke corpus"""
    return experiment.bundle()


@pytest.fixture
def tornado_domain():
    return default_benchmark_domains()[1]


@pytest.fixture
def pairs32(tornado_domain):
    """Sixteen 32x32 pairs, alternately damaged and undamaged"""
    return [render_pair(tornado_domain, i, i % 2 == 0, 32) for i in range(16)]
