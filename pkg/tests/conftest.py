import numpy as np
import pytest
import torch

from semifss.dataset import generate_shapes_dataset

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    generate_shapes_dataset(6, 7, (32, 32), seed=3, out_root=root)
    return root


@pytest.fixture(scope="session")
def shapes(shapes_root):
    from semifss.dataset import load_class_dataset

    return load_class_dataset(shapes_root, (32, 32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, (ok, detail) in sorted(RESULTS.items(), key=lambda kv: str(kv[0])):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
