import shutil
from pathlib import Path

import pytest

from conceptdlm.config import RunConfig
from conceptdlm.dataset import generate_dataset
from conceptdlm.supervision import build_corpus_vocab

ROOT_DIR = Path(__file__).parent.parent
TEST_DIR = ROOT_DIR / "tests"
TEMP_DIR = TEST_DIR / "temp"

shutil.rmtree(TEMP_DIR, ignore_errors=True)
TEMP_DIR.mkdir(parents=True, exist_ok=True)


@pytest.fixture
def temp_dir(request):
    name = f"{request.module.__name__}-{request.node.name}"
    if request.cls is not None:
        name = f"{request.module.__name__}-{request.cls.__name__}-{request.node.name}"
    new_dir = TEMP_DIR / name.replace("[", "_").replace("]", "")
    new_dir.mkdir()
    return new_dir


@pytest.fixture(scope="session")
def corpus_dir():
    """A small generated corpus shared by the tests that only read it."""
    data_dir = TEMP_DIR / "corpus"
    generate_dataset(data_dir, n_train=12, n_test=4, modes=["normal", "no_cot", "RE"], seed=7)
    build_corpus_vocab(data_dir)
    return data_dir


@pytest.fixture
def tiny_config():
    """A config small enough for a training run in a unit test."""
    return RunConfig.from_dict(
        {
            "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_len": 256},
            "train": {"epochs": 1, "batch": 4, "lr": 0.01, "n_samples": 8, "seed": 3},
            "eval": {"gen_len": 8, "block_len": 4, "steps_per_block": 2},
            "compare": {"seeds": [1], "n_eval": 2},
        }
    )
