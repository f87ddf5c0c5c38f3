# conftest.py
import numpy as np
import pytest
from dotenv import load_dotenv

from sfim.model import ModelConfig
from sfim.settings import get_settings

load_dotenv()  # allow local runs to pick up .env


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """2 levels, width 8, one block per stage."""
    return ModelConfig(levels=2, channels=(8, 16), encoder_blocks=(1, 1), decoder_blocks=(1, 1),
                       rdb_per_sdb=1, rdb_layers=2, patch=4)


@pytest.fixture
def one_level_config():
    return ModelConfig(levels=1, channels=(4,), encoder_blocks=(1,), decoder_blocks=(1,),
                       block_types=("fdb",), patch=4)


@pytest.fixture(scope="session")
def slow_enabled():
    if not get_settings().run_slow:
        pytest.skip("Skipping desk-scale experiments; set SFIM_RUN_SLOW=1 to run them")
    return True


def pytest_sessionstart(session):
    session.config.cache.set("gradcheck_results", [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Add custom section to pytest output summary."""
    results = terminalreporter.config.cache.get("gradcheck_results", [])
    if results:
        terminalreporter.section("Gradient Check Results")
        for record in sorted(results, key=lambda r: r["worst"], reverse=True):
            terminalreporter.write_line(
                f"{record['name']:<28} worst {record['worst']:.2e}  ({record['worst_group']}, {record['samples']} samples)")
