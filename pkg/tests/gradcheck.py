"""Shared central finite-difference gradient checking utilities."""

import numpy as np


def finite_difference(f, arr, eps=1e-6):
    """Central-difference gradient of scalar-valued f() w.r.t. arr in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = f()
        arr[idx] = orig - eps
        lo = f()
        arr[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def block_rel_error(analytic, numeric):
    """Relative L2 error between a gradient block and its numeric estimate."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / denom


def check_model_gradients(loss_fn, named_params, eps=1e-6, tol=1e-4):
    """Compare backprop gradients of every parameter block to central FD.

    ``loss_fn`` builds the scalar loss tensor from scratch on every call;
    ``named_params`` is an iterable of (name, Parameter).  Returns the worst
    (name, error) pair; asserts every block is within ``tol``.
    """
    named_params = list(named_params)
    for p in (p for _, p in named_params):
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named_params}

    worst = ("", 0.0)
    for name, p in named_params:
        numeric = finite_difference(lambda: float(loss_fn().data), p.data, eps=eps)
        err = block_rel_error(analytic[name], numeric)
        if err > worst[1]:
            worst = (name, err)
        assert err < tol, f"gradient mismatch for {name}: rel error {err:.3e}"
    return worst
