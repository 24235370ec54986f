import sys
from pathlib import Path

import pytest

# Make the fixture helpers (tests/toy.py etc.) importable regardless of how
# pytest was launched.
sys.path.insert(0, str(Path(__file__).parent))

from forgeloop.contract import load_contract  # noqa: E402
from forgeloop.workspace import init_workspace  # noqa: E402

import toy  # noqa: E402


@pytest.fixture
def toy_contract(tmp_path):
    config = toy.write_target(tmp_path / "target")
    return load_contract(config)


@pytest.fixture
def toy_workspace(toy_contract, tmp_path):
    return init_workspace(toy_contract, tmp_path / "ws")
