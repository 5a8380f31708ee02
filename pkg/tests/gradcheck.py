"""Central finite-difference oracle for the autodiff engine."""
import numpy as np

from iftpp import autodiff as ad

STEP = 1e-5


def numeric_grad(f, arrays, i, step=STEP):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        up = float(f(*[ad.constant(a) for a in arrays]).data)
        x[idx] = old - step
        down = float(f(*[ad.constant(a) for a in arrays]).data)
        x[idx] = old
        g[idx] = (up - down) / (2 * step)
    return g


def analytic_grads(f, arrays):
    params = [ad.parameter(a) for a in arrays]
    ad.backward(f(*params))
    return [np.zeros_like(a) if p.grad is None else p.grad for a, p in zip(arrays, params)]


def max_rel_error(f, arrays, atol=1e-6):
    """Largest ``|analytic - numeric| / max(|numeric|, atol / 1e-4)`` over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = analytic_grads(f, arrays)
    worst = 0.0
    for i, g in enumerate(grads):
        n = numeric_grad(f, arrays, i)
        denom = np.maximum(np.abs(n), atol / 1e-4)
        worst = max(worst, float(np.max(np.abs(g - n) / denom)) if g.size else 0.0)
    return worst


def assert_grads(f, arrays, rtol=1e-4, atol=1e-6):
    err = max_rel_error(f, arrays, atol)
    assert err < rtol, f"finite-difference mismatch: relative error {err:.3g}"
