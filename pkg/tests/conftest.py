import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def artifact_dir():
    """Disk cache for trained models shared across acceptance tests.

    Keyed by config digests inside; delete tests/_artifacts to retrain from
    scratch.
    """
    d = Path(__file__).parent / "_artifacts"
    d.mkdir(exist_ok=True)
    return d
