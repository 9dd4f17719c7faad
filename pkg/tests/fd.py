"""Central finite differences, used as the independent oracle for tape gradients."""

import numpy as np

from gsmn.autodiff import Tape, Tensor

STEP = 1e-5


def numeric_grad(fn, arrays, step=STEP):
    """d fn / d arrays[k] by central differences; ``fn`` maps numpy arrays to a float."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for ix in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][ix] += step
            minus[k][ix] -= step
            g[ix] = (fn(*plus) - fn(*minus)) / (2 * step)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom < 1e-12 else float(np.linalg.norm(a - b) / denom)


def tape_grad(build, arrays, weights=None):
    """Gradients of sum(weights * build(tape, *tensors)) with respect to each input."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    tape = Tape()
    out = build(tape, *tensors)
    w = np.ones(out.shape) if weights is None else weights
    loss = tape.sum(tape.mul(out, w))
    tape.backward(loss)
    return [t.grad for t in tensors]


def check_op(build, arrays, weights=None):
    """Max relative error between tape and finite-difference gradients of one op."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = tape_grad(build, arrays, weights)

    def value(*arrs):
        tape = Tape(record=False)
        out = build(tape, *[Tensor(a) for a in arrs])
        w = np.ones(out.shape) if weights is None else weights
        return float((out.data * w).sum())

    numeric = numeric_grad(value, arrays)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def check_params(loss_fn, params, max_entries=None, seed=0):
    """Relative error per named parameter for a scalar ``loss_fn(tape)``.

    ``max_entries`` samples that many coordinates per parameter (all if None).
    """
    tape = Tape()
    loss = loss_fn(tape)
    for p in params.values():
        p.grad = None
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        coords = list(np.ndindex(p.shape))
        if max_entries is not None and len(coords) > max_entries:
            coords = [coords[i] for i in rng.choice(len(coords), max_entries, replace=False)]
        base = p.data.copy()
        a, n = [], []
        for ix in coords:
            vals = []
            for sgn in (1.0, -1.0):
                d = base.copy()
                d[ix] += sgn * STEP
                p.assign(d)
                vals.append(loss_fn(Tape(record=False)).item())
            p.assign(base)
            a.append(analytic[ix])
            n.append((vals[0] - vals[1]) / (2 * STEP))
        errors[name] = rel_error(a, n)
    return errors
