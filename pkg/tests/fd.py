"""Central finite-difference gradient oracle."""
from __future__ import annotations

import numpy as np

from copad import diffcore as dc


def numeric_grad(f, x: dc.Tensor, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().data)
        flat[i] = old - h
        fm = float(f().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # the floor keeps exactly-zero gradients (e.g. attention key biases, which
    # shift every logit equally) from turning FD round-off into large ratios
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-6)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_grads(f, tensors, h: float = 1e-6) -> float:
    """Largest relative error between backprop and finite differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    dc.backward(f())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_err(analytic, numeric_grad(f, t, h)))
    return worst


# Parameters whose effect is cancelled downstream, so their exact gradient is
# zero and a finite difference only measures round-off:
#   .bk       adds the same constant to every attention logit of a query
#   score1.b  adds the same constant to every mode logit
#   tok1.b    adds one constant to all channels of a time token, which every
#             following layer norm removes
# For these the backprop gradient itself must vanish.
SHIFT_INVARIANT_SUFFIXES = (".bk", "score1.b", "tok1.b")


def max_param_grad_error(f, store, names=None, h: float = 1e-6, max_entries: int = 40, seed: int = 0) -> float:
    """Spot-check up to ``max_entries`` entries of each named parameter."""
    rng = np.random.default_rng(seed)
    store.zero_grad()
    dc.backward(f())
    worst = 0.0
    for name in names or store.names():
        p = store[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        if name.endswith(SHIFT_INVARIANT_SUFFIXES):
            worst = max(worst, float(np.abs(analytic).max(initial=0.0)) / 1e-6)
            continue
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        num = np.zeros(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            num[k] = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(analytic.reshape(-1)[idx], num))
    store.zero_grad()
    return worst
