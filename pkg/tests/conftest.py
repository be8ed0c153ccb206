import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fgfp import data


def repo_root() -> str:
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def artifacts_dir() -> str:
    path = os.environ.get("FGFP_ARTIFACTS", os.path.join(repo_root(), "artifacts"))
    os.makedirs(path, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def digit_dir(tmp_path_factory) -> str:
    """Small digit corpus shared by fast tests (600 train / 200 test)."""
    path = tmp_path_factory.mktemp("digits-small")
    data.generate_digit_corpus(str(path), n_train=600, n_test=200, seed=11)
    return str(path)


@pytest.fixture(scope="session")
def digit_splits(digit_dir):
    train, test = data.load_mnist_idx(digit_dir)
    tr, val = data.split_train_val(train, seed=1)
    return tr, val, test


@pytest.fixture()
def rng():
    return np.random.default_rng(0xF6F9)
