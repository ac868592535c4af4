import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.config_manager import ConfigManager
from config.presets import MODEL_PRESETS
from core.commcost import LinkModel
from core.job_types import PrecisionConfig

MODEL_NAMES = sorted(MODEL_PRESETS)


def load_preset(model: str = "mixtral-8x7b", gpu: str = "h800", overrides=()):
    manager = ConfigManager()
    return manager.build(manager.load_config(model, gpu, list(overrides)))


@pytest.fixture
def mixtral():
    return load_preset("mixtral-8x7b")


@pytest.fixture
def h800(mixtral):
    return mixtral.cluster


@pytest.fixture
def link(mixtral):
    return LinkModel.from_cluster(mixtral.cluster, mixtral.link)


@pytest.fixture
def bf16():
    return PrecisionConfig()


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("MOEPLAN_SEED", raising=False)
