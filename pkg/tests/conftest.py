import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from se_explain.data import serialize_cifar, synthetic_shapes  # noqa: E402
from se_explain.model import build_smallcnn  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_se_model():
    """Randomly initialised SE SmallCNN on 16x16 RGB inputs."""
    return build_smallcnn(10, (3, 16, 16), se_enabled=True, seed=3)


def write_cifar10_dir(root, n_train=100, n_test=40, seed=0):
    """Synthetic images laid out like the CIFAR-10 binary distribution."""
    base = Path(root) / "cifar-10-batches-bin"
    base.mkdir(parents=True, exist_ok=True)
    train = synthetic_shapes(n_train * 5, seed=seed, size=32)
    for i in range(5):
        part = train.subset(np.arange(i * n_train, (i + 1) * n_train))
        (base / f"data_batch_{i + 1}.bin").write_bytes(serialize_cifar(part))
    test = synthetic_shapes(n_test, seed=seed + 1, size=32, split="test")
    (base / "test_batch.bin").write_bytes(serialize_cifar(test))
    return Path(root)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    return write_cifar10_dir(tmp_path_factory.mktemp("cifar"))
