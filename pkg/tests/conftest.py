import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cforge.backends import BackendEndpoint, RetryPolicy
from cforge.mockworld import MockWorld, mock_backend


@pytest.fixture
def world():
    return MockWorld(rng_seed=7, embedding_dim=64)


@pytest.fixture
def backend(world):
    return mock_backend(
        world,
        endpoint=BackendEndpoint(
            base_url="mock://world", retry=RetryPolicy(max_attempts=3, backoff=(0.0,))
        ),
    )
