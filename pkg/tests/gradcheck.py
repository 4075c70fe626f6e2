"""Central finite differences for layer and loss gradients (float64 only)."""
from __future__ import annotations

import numpy as np

STEP = 1e-6
TOL = 1e-3
FLOOR = 1e-6  # denominators below this are treated as absolute error


def fd_gradient(fn, array, index=None, step=STEP):
    """Central difference of scalar ``fn()`` (or ``fn(array)``) w.r.t. ``array``.

    With ``index`` returns one coordinate; otherwise the full gradient.
    """
    call = (lambda: fn(array)) if fn.__code__.co_argcount else fn
    if index is not None:
        old = array[index]
        array[index] = old + step
        up = call()
        array[index] = old - step
        down = call()
        array[index] = old
        return (up - down) / (2 * step)
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        grad[idx] = fd_gradient(fn, array, idx, step)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), FLOOR)))


def _near_kink(fn, array, idx) -> bool:
    # a ReLU or max-pool switch inside the stencil makes the two step sizes disagree
    a = fd_gradient(fn, array, idx, STEP)
    b = fd_gradient(fn, array, idx, STEP * 10)
    return abs(a - b) > 1e-4 * max(abs(a), abs(b), 1e-3)


def check_layer(layer, x, rng, params=(), train=True, coords=24):
    """Compare analytic dx and parameter gradients of one layer against central differences.

    The scalar probe is ``sum(dy * layer(x))`` with a fixed random ``dy``.
    At least ``coords`` kink-free coordinates are checked per tensor.
    """
    y, cache = layer.forward(x, train)
    dy = rng.normal(size=y.shape)
    dx, grads = layer.backward(dy, cache, True, bool(params))

    def probe():
        return float(np.sum(dy * layer.forward(x, train)[0]))

    targets = [("input", x, dx)] + [(p, layer.tensors()[p], grads[p]) for p in params]
    for name, array, analytic in targets:
        candidates = rng.permutation(array.size)
        checked = 0
        for flat in candidates:
            idx = np.unravel_index(flat, array.shape)
            if _near_kink(probe, array, idx):
                continue
            num = fd_gradient(probe, array, idx)
            ana = analytic[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), FLOOR)
            assert err < TOL, f"{type(layer).__name__} {name}{idx}: analytic {ana} numeric {num}"
            checked += 1
            if checked >= coords:
                break
        assert checked >= min(coords, array.size) // 2 and checked >= min(20, array.size), name
    return True
