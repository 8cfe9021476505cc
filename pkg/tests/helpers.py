"""Shared test utilities: central finite-difference gradient oracle."""
import numpy as np

from kwsmixer import numeric as nm


def fd_grad(fn, tensors, wrt, eps=1e-5):
    """Central finite differences of scalar fn w.r.t. one tensor (64-bit)."""
    g = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(build_loss, params, rtol=1e-4, eps=1e-5):
    """Compare tape gradients against finite differences for each param.

    build_loss() must rebuild the graph from the params' current data and
    return a scalar Tensor.
    """
    with nm.Tape() as tape:
        loss = build_loss()
    nm.backward(tape, loss, params=params)
    analytic = [p.grad.copy() for p in params]

    def scalar():
        with nm.Tape():
            return float(build_loss().data)

    for p, ga in zip(params, analytic):
        gn = fd_grad(scalar, params, p, eps=eps)
        denom = max(np.abs(gn).max(), np.abs(ga).max(), 1e-8)
        rel = np.abs(ga - gn).max() / denom
        assert rel < rtol, f"gradient mismatch rel={rel:.3e} for shape {p.shape}"
