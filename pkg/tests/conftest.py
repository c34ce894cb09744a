import numpy as np
import pytest

from mvmcad import tensor as T
from mvmcad.tensor import Tensor


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def numeric_grad(fn, arr, step=1e-5):
    """Central differences of scalar ``fn(ndarray)``; written independently of
    the library's own finite-difference helper."""
    arr = np.array(arr, dtype=np.float64)
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        hi, lo = arr.copy(), arr.copy()
        hi[i] += step
        lo[i] -= step
        out[i] = (fn(hi) - fn(lo)) / (2 * step)
    return out


def analytic_grad(fn, arr):
    x = Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
    T.backward(fn(x))
    return x.grad


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grad(fn, arr, tol=1e-4):
    """fn maps a Tensor to a scalar Tensor."""
    num = numeric_grad(lambda a: fn(Tensor(a)).item(), arr)
    ana = analytic_grad(fn, arr)
    assert rel_err(ana, num) <= tol


TINY = {
    "model": {"image_size": 16, "patch_size": 4, "embed_dim": 16, "depth": 4, "heads": 2,
              "mlp_ratio": 2, "decoder_depth": 2},
    "train": {"iterations": 6, "batch_size": 4, "checkpoint_every": 3},
    "data": {"categories": ["disc", "plate"], "views": 2, "train_samples": 3,
             "test_normal": 2, "test_defective": 2},
}


@pytest.fixture
def tiny_cfg():
    from mvmcad.config import RunConfig
    return RunConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from mvmcad.config import RunConfig
    from mvmcad.data import SynthPlan, synth_dataset
    root = tmp_path_factory.mktemp("tiny") / "data"
    return synth_dataset(root, SynthPlan.from_config(RunConfig.from_dict(TINY)))
