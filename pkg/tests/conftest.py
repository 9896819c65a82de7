import numpy as np
import pytest

from stgr.config import preset
from stgr.synth import derive_seed, generate_scene


def random_bitmap(rng, h, w, density=None):
    """Blobby random bitmap: thresholded sum of a few boxes plus pixel noise."""
    density = rng.uniform(0.05, 0.6) if density is None else density
    bm = rng.random((h, w)) < density * 0.3
    for _ in range(rng.integers(0, 4)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        bm[y0:y0 + rng.integers(1, h // 2 + 2), x0:x0 + rng.integers(1, w // 2 + 2)] = True
    return bm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return preset("tiny")


@pytest.fixture(scope="session")
def tiny_scenes(tiny_config):
    return [generate_scene(tiny_config.phantom, derive_seed(3, i), f"t{i:02d}") for i in range(10)]


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def criterion_detail(request):
    """Free-text detail printed next to the criterion's pass/fail line."""
    marker = request.node.get_closest_marker("criterion")
    entry = ACCEPTANCE.setdefault(marker.args[0], {"outcome": "passed", "detail": []})
    return entry["detail"]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped or (rep.when != "call" and rep.passed):
        return
    entry = ACCEPTANCE.setdefault(marker.args[0], {"outcome": "passed", "detail": []})
    if rep.failed:
        entry["outcome"] = "failed"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        e = ACCEPTANCE[n]
        status = "PASS" if e["outcome"] == "passed" else "FAIL"
        detail = "; ".join(e["detail"])
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({detail})" if detail else ""))
