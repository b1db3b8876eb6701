import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ecgfoundry.data import SynthSpec, synth_generate  # noqa: E402
from ecgfoundry.model import ModelConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset():
    """60 patients x 2 records, labeled."""
    return synth_generate(SynthSpec(), 60, 2, seed=3)


@pytest.fixture
def tiny_config():
    return ModelConfig(patch=250, depth=1, dim=16, decoder_depth=1, proj_dim=8)


_CRITERIA: dict[int, bool] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    if report.failed or (report.when == "call" and not report.passed):
        _CRITERIA[n] = False
    elif report.when == "call":
        _CRITERIA.setdefault(n, True)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
