import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from transferlab import data as datamod

settings.register_profile("ci", deadline=None, derandomize=True, max_examples=30)
settings.load_profile("ci")

SYNTH_TRAIN = 600
SYNTH_TEST = 200


def real_cifar_root():
    """Path to the real CIFAR-10 binaries, or None if absent."""
    root = os.environ.get("TRANSFERLAB_DATA_ROOT")
    for candidate in ([root] if root else []) + ["data", str(Path.home() / "data")]:
        if candidate is None:
            continue
        path = Path(candidate)
        for sub in (path, path / "cifar-10-batches-bin"):
            if (sub / "test_batch.bin").exists() and (sub / "data_batch_5.bin").exists():
                try:
                    if (sub / "data_batch_1.bin").stat().st_size == 10000 * 3073:
                        return path
                except OSError:
                    pass
    return None


requires_real_cifar = pytest.mark.skipif(
    real_cifar_root() is None,
    reason="real CIFAR-10 binaries not found (set TRANSFERLAB_DATA_ROOT; "
    "this container has no network route to fetch them)",
)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("synth_cifar")
    datamod.ensure_synthetic_dataset(root, SYNTH_TRAIN, SYNTH_TEST, seed=7)
    return root


@pytest.fixture(scope="session")
def synth_splits(synth_root):
    return datamod.load_cifar10(synth_root, require_official_sizes=False)


@pytest.fixture(autouse=True)
def _stable_torch_seed():
    torch.manual_seed(1234)
    np.random.seed(1234)
    yield


# ---------------------------------------------------------------------------
# acceptance-criterion reporting: one visible line per criterion at the end
# ---------------------------------------------------------------------------

CRITERION_RESULTS: dict = {}


def record_criterion(number: int, description: str, status: str, detail: str = ""):
    """status: PASS | FAIL | SKIP."""
    CRITERION_RESULTS[number] = (description, status, detail)
    line = f"[criterion {number:2d}] {status}: {description}"
    if detail:
        line += f" ({detail})"
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERION_RESULTS):
        description, status, detail = CRITERION_RESULTS[number]
        line = f"[criterion {number:2d}] {status}: {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
