import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("zihhh", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("zihhh")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def germany_data_500():
    """One dataset from the 16-state zero-inflated process at T=500."""
    from zihhh.simulation import germany_config, simulate

    cfg = germany_config(T=500)
    return cfg, cfg.template.with_counts(simulate(cfg, seed=99))


_ACCEPTANCE = []


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    seen = []

    def _report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        seen.append(number)
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok

    yield _report
    if not seen:
        number = getattr(request.node.function, "criterion", "?")
        _ACCEPTANCE.append((number, f"FAIL criterion {number:>2}: did not complete"))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE, key=lambda p: (str(type(p[0])), p[0])):
            terminalreporter.write_line(line)
