import pytest
from hypothesis import HealthCheck, settings

# invariants of the core, sharing and simulation modules run at this many generated cases
PROPERTY_EXAMPLES = 10_000

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

heavy = settings(max_examples=PROPERTY_EXAMPLES, deadline=None, suppress_health_check=[HealthCheck.too_slow])

# outcome of every invariant test that ran in this session, keyed by (module, name)
INVARIANT_OUTCOMES: dict[tuple[str, str], bool] = {}


def invariant(fn):
    """Heavy property test whose outcome also feeds the acceptance report."""
    return pytest.mark.invariant(heavy(fn))


def pytest_collection_modifyitems(items):
    # the acceptance report runs last so it can reuse the invariant outcomes
    items.sort(key=lambda it: it.nodeid.split("::")[0].endswith("test_acceptance.py"))


def pytest_runtest_logreport(report):
    if report.when == "call" and "invariant" in report.keywords:
        path, name = report.nodeid.split("::")[:2]
        INVARIANT_OUTCOMES[(path.rsplit("/", 1)[-1][:-3], name)] = report.passed


@pytest.fixture
def lbb_pair():
    from abrfair.core import PlayerSpec, QualityFunction
    from abrfair.policies import LBB

    return (
        PlayerSpec(policy=LBB(), quality=QualityFunction(0.9)),
        PlayerSpec(policy=LBB(), quality=QualityFunction(0.3)),
    )


# one verdict line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
