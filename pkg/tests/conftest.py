import numpy as np
import pytest

from phenotrace.features import ExtractionConfig, build_dataset, default_registry
from phenotrace.synthetic import GeneratorConfig, generate


@pytest.fixture(scope="session")
def small_cohort():
    cohort, truth = generate(GeneratorConfig(n_users=12, seed=3))
    return cohort, truth


@pytest.fixture(scope="session")
def small_dataset(small_cohort):
    cohort, _ = small_cohort
    return build_dataset(cohort, default_registry(), ExtractionConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
