"""Shared test fixtures and configuration for the test suite."""
import os

import numpy as np
import pytest

from core.channel import make_config, generate, normalize
from core.codec import CodecConfig, build_model
from core.finetune import TrainConfig
from core.tensor import ParamSet
from core.update import UpdatePriorConfig, UpdateQuantizer

# Keep test runs away from the real run directories
os.environ.setdefault("CSI_OUT_DIR", "test-runs")
os.environ.setdefault("CSI_LOG_DIR", "test-logs")


@pytest.fixture
def small_codec():
    """A codec small enough to train in a few seconds."""
    return CodecConfig(hidden=4, kernel=3, prior_filters=(3, 3))


@pytest.fixture
def channel_config():
    return make_config(n_tx=8, n_sub=8, n_paths=4, angle_spread=0.05, seed=7)


@pytest.fixture
def csi_dataset(channel_config):
    """Twenty normalized 8x8 samples."""
    return normalize(generate(channel_config, 20))


@pytest.fixture
def small_model(small_codec):
    return build_model(3, (8, 8), small_codec)


@pytest.fixture
def quantizer():
    return UpdateQuantizer()


@pytest.fixture
def spike_slab_config():
    return UpdatePriorConfig()


@pytest.fixture
def fast_train_config():
    """Two epochs, small batches; enough to exercise every training path."""
    return TrainConfig(mode="full_model", lam=16.0, epochs=2, batch=8, lr=1e-3, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _central_differences(fn, params: ParamSet, eps: float = 1e-6) -> ParamSet:
    out = ParamSet()
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus, minus = params.copy(), params.copy()
            plus[name][idx] += eps
            minus[name][idx] -= eps
            g[idx] = (fn(plus) - fn(minus)) / (2 * eps)
        out[name] = g
    return out


@pytest.fixture
def numeric_grad():
    """Central finite differences of a scalar function of a ParamSet."""
    return _central_differences


@pytest.fixture
def isolated_dirs(tmp_path, monkeypatch):
    """Point output and log directories at tmp_path."""
    monkeypatch.setenv("CSI_OUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("CSI_LOG_DIR", str(tmp_path / "logs"))
    return tmp_path


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow running"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests"
    )
    config.addinivalue_line(
        "markers", "unit: marks tests as unit tests"
    )


# Skip slow tests by default unless explicitly requested
def pytest_collection_modifyitems(config, items):
    """Modify test collection to handle markers."""
    if config.getoption("--run-slow"):
        return

    skip_slow = pytest.mark.skip(reason="need --run-slow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def pytest_addoption(parser):
    """Add command line options."""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run slow tests"
    )
