"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from ccoma import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-3)
    return float(np.abs(a - b).max() / scale)


def check_grads(loss_fn, tensors, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and finite differences."""
    with ad.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: float(loss_fn().data), t.data, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst
