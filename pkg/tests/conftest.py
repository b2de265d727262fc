import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cfsl.data import SynthSpec, generate_synthetic
from cfsl.model import ModelState

settings.register_profile("cfsl", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cfsl")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_splits():
    spec = SynthSpec(n_known=6, n_novel=5, images_per_class=20, heldout_per_class=4, seed=3)
    return generate_synthetic(spec)


@pytest.fixture
def small_model():
    # 16x16 input -> 2x2 map with two blocks
    return ModelState.init(in_channels=1, n_classes=3, widths=(4, 8), n_splits=4, n_perms=6,
                           seed=5, conv_init="he")


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(criterion, passed, detail):
        ACCEPTANCE[criterion] = (bool(passed), detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
