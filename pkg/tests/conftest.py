import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dynskin import synthetic as sw  # noqa: E402


@pytest.fixture(scope="session")
def small_config():
    return sw.SyntheticConfig(n_verts=120, n_joints=6, n_shape_pcs=4, seed=3)


@pytest.fixture(scope="session")
def small_model(small_config):
    return sw.gen_template(small_config)


@pytest.fixture(scope="session")
def small_tissue(small_model, small_config):
    return sw.tissue_model(small_model, small_config)


@pytest.fixture(scope="session")
def desk_config():
    return sw.SyntheticConfig()


@pytest.fixture(scope="session")
def desk_model(desk_config):
    return sw.gen_template(desk_config)


@pytest.fixture(scope="session")
def desk_tissue(desk_model, desk_config):
    return sw.tissue_model(desk_model, desk_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def accept(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash.setdefault(_ACCEPT_KEY, []).append(line)
        assert ok, line

    return record


_ACCEPT_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
