"""Shared test oracles, independent of the library code paths they check."""

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(floor, |a|, |b|), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(make_loss, params, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare analytic gradients against the finite-difference oracle.

    ``make_loss()`` must rebuild the scalar loss Tensor from the current
    parameter values (so FD perturbations take effect) and ``params`` is
    the list of Parameters to check. Returns the worst relative error.
    """
    loss = make_loss()
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.grad = None

    worst = 0.0
    for p in params:

        def eval_at(x, p=p):
            saved = p.data
            p.data = x.astype(saved.dtype)
            value = float(make_loss().data)
            p.data = saved
            return value

        numeric = finite_difference_grad(eval_at, p.data.astype(np.float64), h)
        err = max_relative_error(analytic[p.name], numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for {p.name}: rel err {err:.3e}"
    return worst
