"""Shared helpers for the test suite."""

import numpy as np
import pytest

from diffreg.bench import GeneratorSpec, generate_scene


def make_pair(
    n_points=24,
    overlap=1.0,
    noise=0.0,
    seed=0,
    **kwargs,
):
    """Small synthetic scene with sensible test defaults."""
    spec = GeneratorSpec(
        n_points=n_points,
        overlap_fraction=overlap,
        noise_sigma=noise,
        seed=seed,
        **kwargs,
    )
    return generate_scene(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# Acceptance tests register one status line per criterion; the summary hook
# prints them after the run so they are visible without -s.
CRITERION_LINES = []


def record_criterion(line):
    CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)
