import math

import numpy as np

from .autograd import Tape, backprop


def grad_check(fn, inputs, eps=1e-5, delta=1e-8, max_coords=None, rng=None):
    """Largest relative error between tape gradients and central differences.

    ``fn`` is a zero-argument closure returning a scalar Tensor built from the
    leaf tensors in ``inputs``.  Each checked coordinate contributes
    ``|analytic - numeric| / max(|analytic|, |numeric|, delta)``.  A
    non-finite forward value anywhere yields ``inf`` so callers comparing
    against a tolerance see a failure rather than a NaN.

    ``max_coords`` caps the number of coordinates checked per input; they are
    then drawn without replacement from ``rng``.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    saved = [None if p.grad is None else p.grad.copy() for p in inputs]
    for p in inputs:
        p.zero_grad()
    with Tape() as tape:
        out = fn()
    if not np.all(np.isfinite(out.data)):
        return math.inf
    backprop(tape, output=out)
    analytic = [p.grad.copy() for p in inputs]
    for p, s in zip(inputs, saved):
        p.grad = s

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(inputs, analytic):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check: input data must be contiguous")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.sum(fn().data))
            flat[i] = orig - eps
            fm = float(np.sum(fn().data))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            num = (fp - fm) / (2 * eps)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), delta)
            worst = max(worst, float(err))
    return worst
