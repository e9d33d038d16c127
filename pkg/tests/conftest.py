import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("mlk", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mlk")

# criterion name -> [passed, details]; filled by tests marked with @pytest.mark.criterion
_criteria: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion listed in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    entry = _criteria.setdefault(mark.args[0], [True, []])
    entry[0] = entry[0] and rep.passed
    entry[1].extend(v for k, v in item.user_properties if k == "detail")
    if not rep.passed:
        entry[1].append(f"{item.name} {rep.outcome} during {rep.when}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, (passed, details) in _criteria.items():
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        if details:
            line += "  | " + "; ".join(details)
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
