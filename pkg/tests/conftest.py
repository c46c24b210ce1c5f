import numpy as np
import pytest

from vnetseg.tensor import ConvParams, Parameter, PReLUParams


def make_conv(kernel, bias=None, stride=1, padding=0):
    kernel = np.asarray(kernel, dtype=np.float64)
    if bias is None:
        bias = np.zeros(kernel.shape[0])
    return ConvParams(Parameter(kernel, "kernel"), Parameter(np.asarray(bias, float), "bias"),
                      stride=stride, padding=padding)


def make_prelu(slopes):
    return PReLUParams(Parameter(np.asarray(slopes, dtype=np.float64), "slope"))


def central_diff(f, arr, h=1e-3):
    """Elementwise central finite differences of scalar f at arr."""
    arr = np.asarray(arr, dtype=np.float64)
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arr)
        flat[i] = orig - h
        fm = f(arr)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
