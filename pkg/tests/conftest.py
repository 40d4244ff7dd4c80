import os
import sys

# acceptance runs are single-threaded; pin BLAS pools before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from mrunet import ArchitectureSpec, build_model
from mrunet.tensor import Tensor


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def bumpy(model, seed, scale=0.1):
    """Random biases move the evaluation point off the ReLU kinks at zero."""
    rng = np.random.default_rng(seed)
    for name, p in model.parameters.items():
        if name.endswith(".bias"):
            p.data[:] = rng.normal(0.0, scale, p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_unet():
    return build_model(ArchitectureSpec("unet", 2, 1), seed=0, dtype=np.float64)


@pytest.fixture
def tiny_mrunet():
    return build_model(ArchitectureSpec("mrunet", 2, 1), seed=0, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
