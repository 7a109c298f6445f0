import numpy as np
import pytest

from gridcp import EnsembleBatch, GridField, SynthConfig

# acceptance tests append "PASS criterion N: ..." lines here; the summary
# hook below prints them after the run so they survive output capture
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(42))


@pytest.fixture
def tiny_synth():
    """3x4 coarse grid upsampled 4x: a 12x16 field, quick to generate."""
    return SynthConfig(coarse_dims=(3, 4), upscale_factor=4, member_count=9)


def make_field(values, mask=None) -> GridField:
    return GridField(np.asarray(values, dtype=np.float64), mask=mask)


def make_ensemble(member_values) -> EnsembleBatch:
    return EnsembleBatch(tuple(make_field(v) for v in member_values))
