"""Shared fixtures for the simulator test suite"""

import sys
from pathlib import Path

import numpy as np
import pytest
from loguru import logger

# Add src to path for imports
sys.path.append(str(Path(__file__).parent.parent / 'src'))

from core.cluster import ClusterSpec
from core.config_manager import parse_config
from core.demand import DemandChain, DemandLevelSet


@pytest.fixture(autouse=True)
def quiet_logger():
    logger.remove()
    logger.add(sys.stderr, level='WARNING')
    yield
    logger.remove()


@pytest.fixture
def levels5():
    return DemandLevelSet.uniform(5)


@pytest.fixture
def levels2():
    return DemandLevelSet.uniform(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_chain(levels: DemandLevelSet, rng: np.random.Generator) -> DemandChain:
    """Dense chain, every row drawn from a flat Dirichlet"""
    size = levels.lambda_levels
    return DemandChain(rng.dirichlet(np.ones(size), size=size), levels)


def small_spec(num_vms: int, num_pms: int, **overrides) -> ClusterSpec:
    values = {'num_vms': num_vms, 'num_pms': num_pms, 'lambda_weight': 1000.0}
    values.update(overrides)
    return ClusterSpec(**values)


def small_config(tmp_path, **sections):
    """Quiet, tiny configuration writing into tmp_path"""
    data = {
        'cluster': {'num_vms': 4, 'num_pms': 4, 'lambda_weight': 1000.0},
        'levels': {'lambda_levels': 3},
        'window_slots': 12,
        'seed': 3,
        'trace': {'synthesis': {'num_slots': 40, 'regime_period': 20}},
        'output': {'directory': str(tmp_path / 'out')},
        'logging': {'level': 'WARNING', 'file': None, 'progress': False},
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return parse_config(data)
