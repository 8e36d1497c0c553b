import sys

import numpy as np
import pytest

from glereduce.projection import compute_blocks, compute_moments

import _factories as fx


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def ref_model():
    return fx.reference_model()


@pytest.fixture
def ref_basis():
    return fx.reference_basis()


@pytest.fixture
def ref_blocks(ref_model, ref_basis):
    return compute_blocks(ref_model, ref_basis)


@pytest.fixture
def ref_moments(ref_blocks):
    return compute_moments(ref_blocks, 6)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)] if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
