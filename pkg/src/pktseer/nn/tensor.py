"""Dense tensors with reverse-mode gradients.

A deliberately small core: every op returns a new :class:`Tensor` whose
``_backward`` closure maps the upstream gradient to one gradient per parent.
Graph nodes are only recorded when some parent requires a gradient and
recording is enabled (see :func:`no_grad`).
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .. import kernels

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` (float32 by default) inside the block."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    dt = a.data.dtype
    return _result((a.data * c).astype(dt, copy=False), (a,), lambda g: ((g * c).astype(dt, copy=False),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a float64 scalar."""
    shape, dt = a.data.shape, a.data.dtype
    return _result(
        np.asarray(a.data.sum(dtype=np.float64)),
        (a,),
        lambda g: (np.full(shape, g, dtype=dt),),
    )


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.data.size)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _result(np.matmul(ad, bd), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


# ----------------------------------------------------------- nonlinearities


def _rows(x):
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def gelu(a: Tensor) -> Tensor:
    x2 = _rows(a.data)
    shape = a.data.shape
    return _result(
        kernels.gelu(x2).reshape(shape),
        (a,),
        lambda g: (kernels.gelu_backward(x2, _rows(g)).reshape(shape),),
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    shape = x.data.shape
    y, xhat, rstd = kernels.layer_norm(_rows(x.data), gamma.data, beta.data, eps)

    def bw(g):
        gx, gg, gb = kernels.layer_norm_backward(_rows(g), xhat, rstd, gamma.data)
        return gx.reshape(shape), gg, gb

    return _result(y.reshape(shape), (x, gamma, beta), bw)


def masked_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` is boolean, True where attending is
    allowed; disallowed entries get a -inf bias. Fully masked rows give zeros."""
    shape = x.data.shape
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf).astype(z.dtype, copy=False)
    y2 = kernels.softmax_rows(_rows(z))
    return _result(
        y2.reshape(shape),
        (x,),
        lambda g: (kernels.softmax_rows_backward(y2, _rows(g)).reshape(shape),),
    )


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- indexing


def embedding(ids, table: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n_rows, d = table.data.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"token id out of range [0, {n_rows})")
    flat = ids.reshape(-1)
    return _result(
        table.data[ids],
        (table,),
        lambda g: (kernels.scatter_add_rows(flat, _rows(g), n_rows),),
    )


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` for basic or integer-array indices, scatter-add backward."""
    shape, dt = a.data.shape, a.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.ascontiguousarray(a.data[index]), (a,), bw)


# ------------------------------------------------------------------ losses


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows.

    ``logits`` is ``[..., k]``, ``targets`` the matching leading shape. Rows
    with zero weight are ignored; if every weight is zero the loss is 0.
    Returned as a float64 scalar.
    """
    k = logits.data.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = _rows(logits.data)
    if z.shape[0] != t.size:
        raise ValueError(f"{t.size} targets for {z.shape[0]} logit rows")
    w = np.ones(t.size) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    live = w != 0
    if np.any(live & ((t < 0) | (t >= k))):
        raise IndexError(f"target id out of range [0, {k})")
    t_safe = np.where(live, t, 0)
    nll, probs = kernels.nll_rows(z, t_safe)
    wsum = w.sum()
    if wsum == 0:
        return _result(np.asarray(0.0), (logits,), lambda g: (np.zeros_like(logits.data),))
    loss = float((w * nll).sum() / wsum)
    shape, dt = logits.data.shape, logits.data.dtype

    def bw(g):
        coef = (float(g) * w / wsum)[:, None]
        d = probs.astype(np.float64)
        d[np.arange(t.size), t_safe] -= 1.0
        return ((d * coef).astype(dt).reshape(shape),)

    return _result(np.asarray(loss), (logits,), bw)
