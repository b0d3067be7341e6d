import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from mhflid import set_debug_checks


@pytest.fixture(autouse=True)
def _debug_checks():
    """Run every test with engine finiteness checks enabled."""
    set_debug_checks(True)
    yield
    set_debug_checks(False)
