import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from randdb import random_database as _random_database  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def random_database():
    return _random_database
