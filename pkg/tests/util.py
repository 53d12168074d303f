"""Shared numeric oracles for the test suite."""

import numpy as np

from stageflow.tensor import GradTape, Tensor, backward


def fd_directional(f, xs, vs, h=1e-3):
    """Central finite-difference directional derivative of f along vs.

    f maps a list of numpy arrays to a numpy array. Differences are taken in
    float64 on float32 evaluations.
    """
    plus = [x.astype(np.float32) + np.float32(h) * v.astype(np.float32) for x, v in zip(xs, vs)]
    minus = [x.astype(np.float32) - np.float32(h) * v.astype(np.float32) for x, v in zip(xs, vs)]
    fp = f(plus).astype(np.float64)
    fm = f(minus).astype(np.float64)
    return (fp - fm) / (2.0 * h)


def fd_param_grad(loss_fn, param: np.ndarray, h=1e-3):
    """Central finite-difference gradient of a scalar loss w.r.t. `param`.

    loss_fn takes a numpy array (the perturbed parameter value) and returns a
    python float.
    """
    g = np.zeros(param.shape, dtype=np.float64)
    flat = param.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn(param)
        flat[i] = orig - h
        lm = loss_fn(param)
        flat[i] = orig
        gf[i] = (lp - lm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error |a - b| / (|a| + eps)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / (np.linalg.norm(a) + 1e-8))


def tape_grads(build_loss, params: dict):
    """Run build_loss under a fresh tape and return the gradient map."""
    tape = GradTape()
    with tape:
        tape.watch_params(params)
        loss = build_loss()
    return backward(loss, tape)
