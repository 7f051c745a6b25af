import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from compass.synthworld import environment_jobs, generate_dataset

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    """12 short sequences over environments 0-3."""
    return generate_dataset(environment_jobs(range(4), 3, seed=5), T=40)


ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records and prints one pass/fail line."""

    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
