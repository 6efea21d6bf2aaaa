import numpy as np
import pytest

from mpost.models import ExponentialScale, MomentBound


class OffsetExponential(ExponentialScale):
    """Negative control: natural gradient shifted by a constant."""
    name = "exponential_offset"

    def _natgrad(self, theta, y):
        return super()._natgrad(theta, y) + 0.1


class ScaledExponential(ExponentialScale):
    """Negative control: natural gradient inflated by 10%.

    Still a martingale, but its fourth moment no longer matches 9 theta^4.
    """
    name = "exponential_scaled"

    def _natgrad(self, theta, y):
        return 1.1 * super()._natgrad(theta, y)

    def moment_bound(self):
        return MomentBound(0.0, 9.0, exact=True)


@pytest.fixture
def offset_family():
    return OffsetExponential()


@pytest.fixture
def scaled_family():
    return ScaledExponential()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
