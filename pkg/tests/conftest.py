import math

import pytest
from hypothesis import HealthCheck, settings

from nhaah.model import DomainSpec, LatticeSpec, ModulationSpec, Rational

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[tuple[int, int, str]] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    """Collect one PASS/FAIL line per acceptance criterion for the session summary."""
    line = f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append((criterion, 0, line))
    print(line)


def supplement(criterion: int, ok: bool, detail: str) -> None:
    """Extra line for an interpretation check that accompanies a literal criterion."""
    line = f"[criterion {criterion:2d}]   (interpretation) {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append((criterion, 1, line))
    print(line)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


A38 = Rational(3, 8)
A14 = Rational(1, 4)


def two_domain_lattice() -> LatticeSpec:
    return LatticeSpec(
        (
            DomainSpec(ModulationSpec(1.5, A38, 0.4 * math.pi), 24),
            DomainSpec(ModulationSpec(1.5, A14, -0.4 * math.pi), 24),
        )
    )


@pytest.fixture
def wall_lattice():
    return two_domain_lattice()
