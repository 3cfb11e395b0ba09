import numpy as np
import pytest

from lstn.dataio import SynthConfig, VideoSequence, synth_video
from lstn.regressor import RegressorConfig, init_model
from lstn.tensor import Tensor


def numeric_grad(f, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``array`` (modified in place)."""
    grad = np.zeros(array.shape, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + eps
        fp = f()
        array[idx] = old - eps
        fm = f()
        array[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return RegressorConfig(channels=(4, 4, 1), downsample=2)


@pytest.fixture
def small_model(small_config):
    return init_model(small_config, seed=3)


@pytest.fixture
def tiny_video():
    cfg = SynthConfig(frames=4, height=16, width=24, heads=4, seed=5)
    frames, ann = synth_video(cfg, "tiny")
    return VideoSequence("tiny", frames, ann)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- acceptance reporting -------------------------------------------------------

CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
