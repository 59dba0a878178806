import pytest
from hypothesis import settings

from frflow.config import validate
from frflow.functionals import LinearEnergy, ReferenceMeasure
from frflow.kernels import MollifierSpec
from frflow.measures import Domain, WeightedEnsemble

settings.register_profile("repo", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def standard():
    return validate({})


@pytest.fixture(scope="session")
def line():
    return Domain(1, 1.0)


@pytest.fixture(scope="session")
def spec(line):
    return MollifierSpec(0.25, line)


@pytest.fixture(scope="session")
def gaussian_ref(line):
    return ReferenceMeasure.named("quadratic", line)


@pytest.fixture(scope="session")
def square(line):
    return LinearEnergy.named("square", line)


def random_ensemble(rng, n, d=1, half_width=1.0):
    x = rng.uniform(-half_width, half_width, size=(n, d))
    w = rng.uniform(0.1, 2.0, size=n)
    return WeightedEnsemble(x, w * n / w.sum())


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    """Log one pass/fail line for an acceptance criterion and return ``ok``."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
