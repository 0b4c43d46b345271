import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from pcdf.core import warm_kernels
from pcdf.model import warm_model


@pytest.fixture(scope="session", autouse=True)
def _warm_jit():
    # compile every kernel once up front so no timing-sensitive test pays
    # compile or cache-load cost mid-measurement
    warm_kernels()
    warm_model()
