"""Central finite-difference oracle for gradient verification.

Independent of the tape: it re-runs the forward closure on perturbed copies
of each input, never touching the analytic backward path it checks.
"""

import numpy as np

from mlfd.numerics import Tape, Tensor, backward

FD_STEP = 1e-5
REL_TOL = 1e-4


def numeric_grads(forward, arrays, step=FD_STEP):
    """Central differences of the scalar `forward(list_of_ndarrays)`."""
    grads = []
    for i, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = g.reshape(-1)
        for j in range(arr.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] += step
            hi = forward(bumped)
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] -= step
            lo = forward(bumped)
            flat[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def analytic_grads(build, arrays):
    """Run `build` over fresh requires-grad tensors under a tape and return
    the deposited leaf gradients."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    tape = Tape()
    with tape:
        loss = build(tensors)
    backward(loss, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def check_gradients(build, arrays, rel_tol=REL_TOL, step=FD_STEP):
    """Assert analytic == finite-difference within `rel_tol` (relative to the
    larger magnitude, floored at 1)."""

    def forward(arrs):
        loss = build([Tensor(a) for a in arrs])
        return float(loss.data.reshape(()))

    ana = analytic_grads(build, arrays)
    num = numeric_grads(forward, arrays, step=step)
    for k, (a, n) in enumerate(zip(ana, num)):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        err = np.abs(a - n) / denom
        worst = float(err.max()) if err.size else 0.0
        assert worst <= rel_tol, f"input {k}: max relative gradient error {worst:.3e} > {rel_tol}"
