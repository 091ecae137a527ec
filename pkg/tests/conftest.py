import numpy as np
import pytest

from gpeft import config as C
from gpeft.graph import TextRichGraph
from gpeft.synthetic import generate
from helpers import small_cfg


@pytest.fixture
def tiny_graph():
    texts = [np.array([1, 2, 3]), np.array([4, 5]), np.array([6]), np.array([7, 8, 9, 10]), np.array([11])]
    feats = np.arange(10.0).reshape(5, 2)
    edges = {"base": [(0, 1), (1, 2), (2, 3)], "task": [(0, 2), (1, 3), (0, 3), (3, 4), (1, 4), (2, 4)]}
    return TextRichGraph(texts, feats, edges, ["base", "task"])


@pytest.fixture(scope="session")
def small_graph():
    graph, topics = generate(C.synth_config(small_cfg()))
    return graph, topics


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
