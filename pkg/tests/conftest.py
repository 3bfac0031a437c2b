import numpy as np
import pytest
import torch

from alden.backbone import get_backbone
from alden.config import BackboneSpec, DoseSimConfig
from alden.data import make_phantom_pairs


@pytest.fixture(scope="session")
def tiny_spec():
    return BackboneSpec()


@pytest.fixture(scope="session")
def tiny_backbone(tiny_spec):
    return get_backbone(tiny_spec)


@pytest.fixture(scope="session")
def phantom_pairs():
    return make_phantom_pairs(8, 64, 6, DoseSimConfig(0.25), seed=11, prefix="fx")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
