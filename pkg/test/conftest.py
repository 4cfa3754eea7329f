"""
Pytest configuration and fixtures for the test suite.
"""

import os
import shutil
import tempfile

import pytest
from src.numerics import make_rng
from src.sample_data import canonical_bandit, rock_paper_scissors


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream"""
    return make_rng(1234)


@pytest.fixture
def canonical_env():
    """One context, three actions, r = (1, 0.5, 0)"""
    return canonical_bandit()


@pytest.fixture
def rps_env():
    """Rock-paper-scissors preference game"""
    return rock_paper_scissors()


@pytest.fixture
def temp_output_dir():
    """Temporary directory for run artifacts, removed afterwards"""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def temp_database():
    """Point REBEL_RESULTS_DB at a temporary database for the duration of a test"""
    temp_dir = tempfile.mkdtemp()
    temp_db_path = os.path.join(temp_dir, "test_results.db")

    original_db_path = os.getenv("REBEL_RESULTS_DB")
    os.environ["REBEL_RESULTS_DB"] = temp_db_path

    yield temp_db_path

    if original_db_path:
        os.environ["REBEL_RESULTS_DB"] = original_db_path
    else:
        del os.environ["REBEL_RESULTS_DB"]

    shutil.rmtree(temp_dir)
