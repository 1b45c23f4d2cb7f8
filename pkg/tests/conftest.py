from importlib import resources

import numpy as np
import pytest

from robplam import io

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def airquality_path():
    return resources.files("robplam") / "data" / "airquality.csv"


@pytest.fixture(scope="session")
def airquality(airquality_path):
    schema = io.Schema.parse("Ozone", "Month:categorical", "Temp,Wind,Solar.R")
    return io.read_csv(airquality_path, schema)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
