import numpy as np
import pytest

from stconsist.tensor import precision, tensor


@pytest.fixture
def f64():
    with precision(64):
        yield


def numeric_grad(fn, arrays, eps=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = fn(*arrays)
            flat[i] = old - eps
            lo = fn(*arrays)
            flat[i] = old
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grad(build, arrays, eps=1e-4):
    """Compare autodiff and finite-difference gradients of ``build(*tensors)``.

    Returns the worst relative error over the inputs.
    """
    from stconsist.tensor import backward

    leaves = [tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    grads = backward(out)
    analytic = [grads.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]

    def value(*arrs):
        return float(build(*[tensor(x) for x in arrs]).data)

    numeric = numeric_grad(value, [np.array(a, dtype=np.float64) for a in arrays], eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))
