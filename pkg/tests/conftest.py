from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from kgroute.graph import AgentSpec, extend_graph, parse_context_graph
from kgroute.synthetic import agent_pool

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def bruschetta_data() -> dict:
    return json.loads((FIXTURES / "bruschetta.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def bruschetta_query(bruschetta_data):
    return parse_context_graph(bruschetta_data["record"])


@pytest.fixture(scope="session")
def pool() -> list[AgentSpec]:
    return agent_pool()


@pytest.fixture(scope="session")
def bruschetta_graph(bruschetta_query, pool):
    return extend_graph(bruschetta_query, pool)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# a small scenario that trains in seconds; used by pipeline and CLI tests
TINY = {
    "scenario": {"train_per_family": 24, "val_per_family": 6, "test_per_family": 10},
    "model": {"hidden": 64},
    "train": {"epochs": 4, "batch_size": 8},
    "embedder": {"dimension": 64},
}
TINY["model"]["input_dim"] = 64


def tiny_config(run_root, **overrides):
    from kgroute.config import build_config

    return build_config(dict(TINY, run_root=str(run_root)), overrides)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
