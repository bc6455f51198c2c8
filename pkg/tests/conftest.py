import numpy as np
import pytest

from curridpo import kernels

BACKENDS = sorted(kernels.BACKENDS)


@pytest.fixture(params=BACKENDS)
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_path(tmp_path_factory):
    """The standard seeded synthetic dataset (2 classes x 50 prompts)."""
    from curridpo import data

    path = tmp_path_factory.mktemp("synthetic") / "dataset.jsonl"
    records, _ = data.generate_synthetic(data.SyntheticConfig())
    data.save_jsonl(records, path)
    return path


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = [line for mod in list(sys.modules.values())
             for line in getattr(mod, "ACCEPTANCE_RESULTS", None) or []]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
