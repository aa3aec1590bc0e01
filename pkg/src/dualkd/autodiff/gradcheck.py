"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(f, inputs, index, eps=1e-6, coords=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``inputs[index]``.

    ``f`` is re-evaluated after perturbing ``inputs[index].data`` in place.
    ``coords`` optionally restricts the check to a subset of flat positions;
    unchecked positions are left as NaN.
    """
    t = inputs[index]
    flat = t.data.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    positions = range(flat.size) if coords is None else coords
    for k in positions:
        old = flat[k]
        flat[k] = old + eps
        fp = float(f().data)
        flat[k] = old - eps
        fm = float(f().data)
        flat[k] = old
        grad[k] = (fp - fm) / (2 * eps)
    return grad.reshape(t.shape)


def finite_diff_gradcheck(f, inputs, eps=1e-6, floor=1e-6, max_coords=None, seed=0):
    """Worst per-coordinate relative error between autodiff and central differences.

    Parameters
    ----------
    f : callable
        Zero-argument function building a scalar :class:`Tensor` from ``inputs``.
    inputs : sequence of Tensor
        Tensors to check; all must be 64-bit and have ``requires_grad`` set.
    eps : float
        Perturbation size.
    floor : float
        Lower bound on the denominator so that coordinates whose true gradient
        is essentially zero do not dominate the ratio.
    max_coords : int, optional
        Check at most this many randomly chosen coordinates per input.

    Returns
    -------
    float
        ``max |a - n| / max(|a|, |n|, floor)`` over all checked coordinates.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs 64-bit inputs")
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(inputs):
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        num = numerical_grad(f, inputs, i, eps=eps, coords=coords)
        a = analytic[i].reshape(-1)
        n = num.reshape(-1)
        sel = ~np.isnan(n)
        denom = np.maximum(np.maximum(np.abs(a[sel]), np.abs(n[sel])), floor)
        err = np.abs(a[sel] - n[sel]) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def nudge_from_kinks(x: np.ndarray, eps: float, margin: float = 10.0) -> np.ndarray:
    """Push values closer than ``margin * eps`` to zero away from it (relu kinks)."""
    x = x.copy()
    close = np.abs(x) < margin * eps
    x[close] = np.where(x[close] >= 0, 1.0, -1.0) * margin * eps * 2
    return x


def leaf(array, requires_grad=True) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=requires_grad)
