"""Hot inner loops, each in two flavours.

``*_nb`` functions are scalar loops compiled by numba; ``*_np`` functions are
vectorised numpy. The module-level names without suffix are bound to one or
the other according to :data:`pktseer._accel.USE_NUMBA`. Both flavours take
and return the same shapes and dtypes; float kernels agree to rounding, the
integer (BPE) kernels agree exactly.

Float kernels operate on 2-D C-contiguous arrays ``[rows, cols]``; callers
reshape. Row statistics are accumulated in float64.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ---------------------------------------------------------------- softmax


def softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0).astype(x.dtype)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(s > 0, e / s, 0.0)
    return y.astype(x.dtype, copy=False)


def _softmax_rows_loop(x):
    n, k = x.shape
    y = np.empty_like(x)
    for i in range(n):
        m = -np.inf
        for j in range(k):
            if x[i, j] > m:
                m = x[i, j]
        if m == -np.inf:
            # every key masked: contribute nothing
            for j in range(k):
                y[i, j] = 0.0
            continue
        s = 0.0
        for j in range(k):
            e = math.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(k):
            y[i, j] = y[i, j] * inv
    return y


def softmax_rows_backward_np(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return (y * (gy - dot)).astype(y.dtype, copy=False)


def _softmax_rows_backward_loop(y, gy):
    n, k = y.shape
    gx = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += gy[i, j] * y[i, j]
        for j in range(k):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


# ------------------------------------------------------------- layer norm


def layer_norm_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True, dtype=np.float64)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).astype(x.dtype)
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), xhat, rstd[:, 0].astype(x.dtype)


def _layer_norm_loop(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y, xhat, rstd


def layer_norm_backward_np(gy, xhat, rstd, gamma):
    d = xhat.shape[1]
    gxhat = gy * gamma
    a = gxhat.mean(axis=1, keepdims=True)
    b = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - a - xhat * b) * rstd[:, None]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    del d
    dt = xhat.dtype
    return gx.astype(dt, copy=False), ggamma.astype(dt), gbeta.astype(dt)


def _layer_norm_backward_loop(gy, xhat, rstd, gamma):
    n, d = xhat.shape
    gx = np.empty_like(xhat)
    ggamma_acc = np.zeros(d, dtype=np.float64)
    gbeta_acc = np.zeros(d, dtype=np.float64)
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(d):
            g = gy[i, j] * gamma[j]
            a += g
            b += g * xhat[i, j]
            ggamma_acc[j] += gy[i, j] * xhat[i, j]
            gbeta_acc[j] += gy[i, j]
        a /= d
        b /= d
        for j in range(d):
            gx[i, j] = (gy[i, j] * gamma[j] - a - xhat[i, j] * b) * rstd[i]
    return gx, ggamma_acc.astype(xhat.dtype), gbeta_acc.astype(xhat.dtype)


# ------------------------------------------------------------------- GELU
# tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))


def gelu_np(x):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    return (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False)


def _gelu_loop(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + GELU_A * v * v * v)))
    return y


def gelu_backward_np(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    dt = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return (gy * dt).astype(x.dtype, copy=False)


def _gelu_backward_loop(x, gy):
    n, d = x.shape
    gx = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
            dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            gx[i, j] = gy[i, j] * dv
    return gx


# ------------------------------------------------------ cross-entropy rows


def nll_rows_np(logits, targets):
    """Per-row negative log-likelihood (float64) and softmax probabilities."""
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp_t = z[np.arange(z.shape[0]), targets] - m[:, 0] - np.log(s[:, 0])
    return -logp_t, (e / s).astype(logits.dtype)


def _nll_rows_loop(logits, targets):
    n, k = logits.shape
    nll = np.empty(n, dtype=np.float64)
    probs = np.empty_like(logits)
    for i in range(n):
        m = -np.inf
        for j in range(k):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(k):
            s += math.exp(np.float64(logits[i, j]) - m)
        inv = 1.0 / s
        for j in range(k):
            probs[i, j] = math.exp(np.float64(logits[i, j]) - m) * inv
        nll[i] = -(np.float64(logits[i, targets[i]]) - m - math.log(s))
    return nll, probs


# --------------------------------------------------- embedding scatter-add


def scatter_add_rows_np(ids, grad, n_rows):
    out = np.zeros((n_rows, grad.shape[1]), dtype=grad.dtype)
    np.add.at(out, ids, grad)
    return out


def _scatter_add_rows_loop(ids, grad, n_rows):
    n, d = grad.shape
    out = np.zeros((n_rows, d), dtype=grad.dtype)
    for i in range(n):
        r = ids[i]
        for j in range(d):
            out[r, j] += grad[i, j]
    return out


# ------------------------------------------------------------------- Adam


def adam_update_np(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


def _adam_update_loop(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    fp = p.reshape(-1)
    fg = g.reshape(-1)
    fm = m.reshape(-1)
    fv = v.reshape(-1)
    for i in range(fp.size):
        gi = fg[i]
        fm[i] = b1 * fm[i] + (1.0 - b1) * gi
        fv[i] = b2 * fv[i] + (1.0 - b2) * gi * gi
        fp[i] -= lr * (fm[i] / bc1) / (math.sqrt(fv[i] / bc2) + eps)


# -------------------------------------------------------------------- BPE
# Token streams are int64 arrays; -1 separates independent texts so that no
# pair spans two texts.


def pair_counts_np(ids, n_tokens):
    a = ids[:-1]
    b = ids[1:]
    ok = (a >= 0) & (b >= 0)
    codes = a[ok] * n_tokens + b[ok]
    return np.bincount(codes, minlength=n_tokens * n_tokens).astype(np.int32)


def _pair_counts_loop(ids, n_tokens):
    counts = np.zeros(n_tokens * n_tokens, dtype=np.int32)
    for i in range(ids.size - 1):
        a = ids[i]
        b = ids[i + 1]
        if a >= 0 and b >= 0:
            counts[a * n_tokens + b] += 1
    return counts


def merge_pair_np(ids, left, right, new_id):
    if ids.size < 2:
        return ids.copy()
    hit = (ids[:-1] == left) & (ids[1:] == right)
    pos = np.flatnonzero(hit)
    if pos.size == 0:
        return ids.copy()
    if left == right:
        # runs like "a a a": merge greedily left to right, keep even offsets
        brk = np.ones(pos.size, dtype=bool)
        brk[1:] = pos[1:] != pos[:-1] + 1
        start = np.maximum.accumulate(np.where(brk, pos, 0))
        pos = pos[(pos - start) % 2 == 0]
    out = ids.copy()
    out[pos] = new_id
    keep = np.ones(ids.size, dtype=bool)
    keep[pos + 1] = False
    return out[keep]


def _merge_pair_loop(ids, left, right, new_id):
    n = ids.size
    out = np.empty(n, dtype=ids.dtype)
    i = 0
    k = 0
    while i < n:
        if i + 1 < n and ids[i] == left and ids[i + 1] == right:
            out[k] = new_id
            i += 2
        else:
            out[k] = ids[i]
            i += 1
        k += 1
    return out[:k].copy()


def apply_merges_np(ids, merges, first_id):
    for r in range(merges.shape[0]):
        if ids.size < 2:
            break
        ids = merge_pair_np(ids, merges[r, 0], merges[r, 1], first_id + r)
    return ids


def _apply_merges_loop(ids, merges, first_id):
    buf = ids.copy()
    n = buf.size
    for r in range(merges.shape[0]):
        if n < 2:
            break
        left = merges[r, 0]
        right = merges[r, 1]
        new_id = first_id + r
        i = 0
        k = 0
        while i < n:
            if i + 1 < n and buf[i] == left and buf[i + 1] == right:
                buf[k] = new_id
                i += 2
            else:
                buf[k] = buf[i]
                i += 1
            k += 1
        n = k
    return buf[:n].copy()


softmax_rows_nb = njit(_softmax_rows_loop)
softmax_rows_backward_nb = njit(_softmax_rows_backward_loop)
layer_norm_nb = njit(_layer_norm_loop)
layer_norm_backward_nb = njit(_layer_norm_backward_loop)
gelu_nb = njit(_gelu_loop)
gelu_backward_nb = njit(_gelu_backward_loop)
nll_rows_nb = njit(_nll_rows_loop)
scatter_add_rows_nb = njit(_scatter_add_rows_loop)
adam_update_nb = njit(_adam_update_loop)
pair_counts_nb = njit(_pair_counts_loop)
merge_pair_nb = njit(_merge_pair_loop)
apply_merges_nb = njit(_apply_merges_loop)

KERNEL_NAMES = (
    "softmax_rows",
    "softmax_rows_backward",
    "layer_norm",
    "layer_norm_backward",
    "gelu",
    "gelu_backward",
    "nll_rows",
    "scatter_add_rows",
    "adam_update",
    "pair_counts",
    "merge_pair",
    "apply_merges",
)

NUMPY = {name: globals()[name + "_np"] for name in KERNEL_NAMES}
NUMBA = {name: globals()[name + "_nb"] for name in KERNEL_NAMES}

# Kernels whose compiled loop beats the vectorised numpy version on typical
# batch shapes (see benchmarks/bench_kernels.py). Elementwise transcendental
# kernels (GELU, exp-heavy rows) stay on numpy's SIMD ufuncs either way.
NUMBA_WINS = frozenset(
    {
        "softmax_rows_backward",
        "layer_norm",
        "layer_norm_backward",
        "scatter_add_rows",
        "pair_counts",
        "merge_pair",
        "apply_merges",
    }
)

_active = {name: (NUMBA if USE_NUMBA and name in NUMBA_WINS else NUMPY)[name] for name in KERNEL_NAMES}
softmax_rows = _active["softmax_rows"]
softmax_rows_backward = _active["softmax_rows_backward"]
layer_norm = _active["layer_norm"]
layer_norm_backward = _active["layer_norm_backward"]
gelu = _active["gelu"]
gelu_backward = _active["gelu_backward"]
nll_rows = _active["nll_rows"]
scatter_add_rows = _active["scatter_add_rows"]
adam_update = _active["adam_update"]
pair_counts = _active["pair_counts"]
merge_pair = _active["merge_pair"]
apply_merges = _active["apply_merges"]
