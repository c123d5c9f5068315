"""Finite-difference oracles shared by the test modules.

These stay independent of the autodiff engine's backward rules: they only
call forward evaluation, so they can serve as the reference for gradient
checks.
"""

import numpy as np

from mmgrad.autodiff import Tape, Tensor, backward


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(x.size):
        keep = xf[i]
        xf[i] = keep + h
        up = f(x)
        xf[i] = keep - h
        down = f(x)
        xf[i] = keep
        flat[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    # floor absorbs central-difference noise (~eps/h) on near-zero entries
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def analytic_grads(build, arrays):
    """Gradient of ``build(*tensors).sum()`` for each input array."""
    xs = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        out = build(*xs)
        loss = out.sum() if out.data.size != 1 else out
        grads = backward(loss, xs)
    return [g.data for g in grads]


def check_op(build, arrays, h: float = 1e-5, tol: float = 1e-4):
    """Compare analytic gradients of sum(build(*inputs)) against central
    differences for every input; returns the worst relative error."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = analytic_grads(build, arrays)
    worst = 0.0
    for i in range(len(arrays)):

        def scalar(x, i=i):
            args = [a.copy() for a in arrays]
            args[i] = x
            out = build(*[Tensor(a) for a in args])
            return float(np.sum(out.data))

        fd = central_diff(scalar, arrays[i], h=h)
        worst = max(worst, rel_err(analytic[i], fd))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
