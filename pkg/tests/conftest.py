import numpy as np

from canopyhm import numerics as nm


def fd_gradients(loss_fn, param, eps=1e-5):
    """Central finite differences of a scalar loss w.r.t. one parameter."""
    num = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    nf = num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        lp = loss_fn().item()
        flat[i] = old - eps
        lm = loss_fn().item()
        flat[i] = old
        nf[i] = (lp - lm) / (2 * eps)
    return num


def max_rel_error(a, b):
    return float((np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))).max())


def gradcheck(loss_fn, params, eps=1e-5, tol=1e-4):
    """Assert analytic gradients match central finite differences for every
    parameter; returns the worst relative error."""
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0
    loss = loss_fn()
    nm.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}
    for p in params:
        p.grad[...] = 0.0
    worst = 0.0
    for p in params:
        num = fd_gradients(loss_fn, p, eps=eps)
        rel = max_rel_error(analytic[id(p)], num)
        worst = max(worst, rel)
        assert rel < tol, f"gradient mismatch for {getattr(p, 'name', 'input')}: {rel}"
    return worst
