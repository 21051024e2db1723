"""Finite-difference gradient checking.

All checks rebuild the loss in float64 (the training dtype is float32) and
compare tape gradients against central differences with step h. Relative
error for a parameter is max|analytic - numeric| / (max|numeric| + floor).
"""

import numpy as np

from .autodiff import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar-valued f at x (elementwise)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def check_gradients(build_loss, params: dict[str, Tensor], h: float = 1e-3, rtol: float = 1e-4):
    """Compare tape gradients of build_loss() against central differences.

    `params` maps names to float64 leaf tensors with requires_grad=True that
    build_loss reads. Returns {name: relative_error}; raises AssertionError on
    the first parameter exceeding rtol.
    """
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    errors = {}
    for name, p in params.items():
        analytic = tape.grad(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)

        def f_at(values, p=p):
            old = p.data
            p.data = np.ascontiguousarray(values, dtype=np.float64)
            try:
                return float(build_loss().data)
            finally:
                p.data = old

        numeric = numeric_grad(f_at, p.data, h=h)
        err = relative_error(analytic, numeric)
        errors[name] = err
        assert err < rtol, f"gradient check failed for {name}: relative error {err:.3e} >= {rtol}"
    return errors
