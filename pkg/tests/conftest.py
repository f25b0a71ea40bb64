import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from notesurv.dataset import simulate  # noqa: E402

BENCH = dict(beta=[1.0, -1.0, 0.0], baseline_rate=0.02, censor_horizon=200.0)
SIGNAL = {"pneumothorax": 2.25, "hemorrhage": 1.8, "intubated": 1.5,
          "stable": -1.8, "ambulating": -1.5}
TEXT_BENCH = dict(beta=[0.8, -0.6, 0.4, 0.0, 0.0], baseline_rate=0.01,
                  censor_horizon=100.0, vocab_signal=SIGNAL)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cox_bench():
    """The 3-coefficient proportional-hazards benchmark (~30% censored)."""
    return simulate(2000, seed=0, **BENCH)


@pytest.fixture(scope="session")
def small_text_data():
    return simulate(120, seed=3, **TEXT_BENCH)
