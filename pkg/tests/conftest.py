import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajbench import pishguve as pv

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")

TINY = pv.ModelConfig(t_in=3, horizon=2, latent_dim=4, node_mlp_hidden=4, lad_linear_dim=4, cnn_channels=(4, 3, 2))
SMALL = pv.ModelConfig(t_in=4, horizon=3, latent_dim=8, node_mlp_hidden=6, lad_linear_dim=8, cnn_channels=(6, 5, 4))


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per test marked ``criterion``
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if number not in _CRITERIA or not rep.passed:
        _CRITERIA[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"{'PASS' if ok else 'FAIL'}  {number:>2}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
