"""Finite-difference gradient checks."""

import numpy as np


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3, stencil: int = 3, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``stencil`` is 3 (f(x+h) - f(x-h)) / 2h) or 5 (fourth-order). ``entries``
    limits the check to a subset of flat indices; others are left at 0.
    """
    flat = x.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        vals = {}
        for k in ((-2, -1, 1, 2) if stencil == 5 else (-1, 1)):
            flat[i] = orig + k * h
            vals[k] = float(f())
        flat[i] = orig
        if stencil == 5:
            out[i] = (-vals[2] + 8 * vals[1] - 8 * vals[-1] + vals[-2]) / (12 * h)
        else:
            out[i] = (vals[1] - vals[-1]) / (2 * h)
    return out.reshape(x.shape)


def directional_check(f, arrays, grads, rng, h=1e-2, stencil=5) -> float:
    """Compare <grad, u> with the finite difference of ``f`` along a random unit
    direction ``u`` spanning every array. Returns the relative error."""
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((np.asarray(g, dtype=np.float64) * d).sum()) for g, d in zip(grads, dirs))
    origs = [a.copy() for a in arrays]

    def at(step):
        for a, o, d in zip(arrays, origs, dirs):
            a[...] = o + step * d
        return float(f())

    if stencil == 5:
        fd = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
    else:
        fd = (at(h) - at(-h)) / (2 * h)
    for a, o in zip(arrays, origs):
        a[...] = o
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12)
