import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles/graph helpers importable

from bitquant.micro_infer import load_dataset
from bitquant.tensor_store import load_model

REPO_ROOT = Path(__file__).parent.parent
FIXTURE_DIR = REPO_ROOT / "fixtures"
DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def student_model():
    return load_model(FIXTURE_DIR / "student.bqnt")


@pytest.fixture(scope="session")
def eval_dataset():
    return load_dataset(FIXTURE_DIR / "eval.bqds")
