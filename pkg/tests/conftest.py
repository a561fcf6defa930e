import numpy as np
import pytest

from vce.tensor import Tensor


def finite_diff_grad(fn, arrays, index, h=1e-4):
    """Central finite differences of scalar fn(*arrays) w.r.t. arrays[index].

    Arrays must be float64 for the quoted accuracy. Returns an array of the
    same shape as arrays[index].
    """
    base = [a.copy() for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        fp = fn(*base)
        target[idx] = orig - h
        fm = fn(*base)
        target[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return out


def sampled_coords(shape, rng, max_coords=48):
    """A reproducible subset of coordinates for spot finite-difference checks."""
    size = int(np.prod(shape))
    if size <= max_coords:
        flat = np.arange(size)
    else:
        flat = rng.choice(size, size=max_coords, replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def fd_check(fn, arrays, index, rng, rtol=1e-4, h=1e-4, max_coords=48):
    """Compare analytic gradient against central differences at sampled coords.

    ``fn`` maps float64 numpy arrays to a scalar Tensor; the analytic gradient
    is taken from backward() on leaf tensors built from ``arrays``.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = fn(*[lv for lv in leaves])
    loss.backward()
    analytic = leaves[index].grad
    assert analytic is not None, "no gradient reached the checked input"

    def scalar_fn(*arrs):
        consts = [Tensor(a) for a in arrs]
        return float(fn(*consts).data)

    base = [a.copy() for a in arrays]
    target = base[index]
    for idx in sampled_coords(arrays[index].shape, rng, max_coords):
        orig = target[idx]
        target[idx] = orig + h
        fp = scalar_fn(*base)
        target[idx] = orig - h
        fm = scalar_fn(*base)
        target[idx] = orig
        num = (fp - fm) / (2.0 * h)
        ana = analytic[idx]
        denom = max(abs(num), abs(ana), 1e-8)
        assert abs(num - ana) / denom < rtol, (
            f"grad mismatch at {idx}: analytic={ana}, numeric={num}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
