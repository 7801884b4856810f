import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ivfuse.backbone import TestBackbone  # noqa: E402
from ivfuse.synthetic import make_synthetic_dataset  # noqa: E402


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory):
    """16 procedurally generated 64x64 pairs with masks."""
    return make_synthetic_dataset(tmp_path_factory.mktemp("synthetic"), n_pairs=16, size=64,
                                  seed=0)


@pytest.fixture
def backbone64():
    return TestBackbone(seed=3).to(torch.float64)


_CRITERIA: dict = {}


@pytest.fixture
def criterion_log():
    """Record ``(number, title, passed, detail)`` for the end-of-run summary."""

    def record(number, title, passed, detail=""):
        _CRITERIA[number] = (title, passed, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status}: {title}"
                                    + (f" ({detail})" if detail else ""))
