import numpy as np
import pytest

from nnfault.graph import Graph, LayerKind, LayerNode
from nnfault.modelio import load_fixture
from nnfault.tensor import Tensor


@pytest.fixture(scope="session")
def lenet():
    return load_fixture()


def residual_graph(seed: int = 0) -> Graph:
    """Two conv blocks with an identity skip around the second."""
    rng = np.random.default_rng(seed)
    w = lambda *s: Tensor(rng.uniform(-0.3, 0.3, s).astype(np.float32))
    return Graph(
        [
            LayerNode("model.block1.conv1", LayerKind.Conv2d, {"pad": 1}, w(4, 2, 3, 3), w(4)),
            LayerNode("model.block1.relu1", LayerKind.ReLU),
            LayerNode("model.block2.conv1", LayerKind.Conv2d, {"pad": 1}, w(4, 4, 3, 3), w(4)),
            LayerNode("model.block2.add", LayerKind.Add, {"src": "model.block1.relu1"}),
            LayerNode("model.block2.relu1", LayerKind.ReLU),
            LayerNode("model.pool", LayerKind.AvgPool2d, {"k": 2}),
            LayerNode("model.flatten", LayerKind.Flatten),
            LayerNode("model.fc", LayerKind.Linear, {}, w(3, 16), w(3)),
        ],
        (2, 4, 4),
    )


@pytest.fixture
def resnet():
    return residual_graph()


# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}" + (f" ({detail})" if detail else ""))
