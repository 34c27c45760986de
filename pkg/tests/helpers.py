"""Shared test oracles: finite differences run in float64."""

import numpy as np

from s2gs import autodiff as ad


def numeric_grad(fn, arrays, h=1e-3):
    """Central finite differences of a scalar-valued fn over float64 arrays.

    ``fn`` receives float64 Tensors (one per input array) and must return a
    scalar Tensor. Returns one gradient array per input.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = [np.zeros_like(a) for a in arrays]
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        gflat = grads[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = _eval(fn, arrays)
            flat[i] = orig - h
            lo = _eval(fn, arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
    return grads


def _eval(fn, arrays):
    with ad.no_grad():
        out = fn(*[ad.Tensor(a, dtype=np.float64) for a in arrays])
    return float(out.data.reshape(()))


def analytic_grad(fn, arrays):
    """Backward-pass gradients of fn at the same float64 inputs."""
    leaves = [ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*leaves)
    ad.backward(out)
    return [leaf.grad.copy() for leaf in leaves]


def assert_grads_close(fn, arrays, h=1e-3, rtol=1e-4, atol=1e-6):
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, h=h)
    for got, want in zip(ana, num):
        denom = np.maximum(np.abs(want), atol / rtol)
        rel = np.abs(got - want) / denom
        assert rel.max() <= rtol, f"gradient mismatch: max rel err {rel.max():.3g}"
