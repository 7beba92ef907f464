"""Tape-free reverse-mode differentiation over numpy arrays.

Every op returns :class:`Tensor` objects.  When gradient recording is on and
at least one input requires a gradient, the outputs are linked to a graph
node holding a closure that maps output gradients to input gradients.
``Tensor.backward`` walks the reachable nodes in reverse topological order.

The heavy recurrent pieces (LSTM cell, whole LSTM sequence, additive
attention, pair max-pooling, smoothed cross-entropy) are fused ops with
hand-written backward passes; that keeps Python overhead per training step
small enough for laptop-scale experiments.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in values or gradients."""


_state = {"grad": True}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class _Node:
    __slots__ = ("inputs", "backward", "shapes", "grads", "multi")

    def __init__(self, inputs, backward, shapes, multi):
        self.inputs = inputs
        self.backward = backward
        self.shapes = shapes
        self.grads = [None] * len(shapes)
        self.multi = multi


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "_index", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None
        self._index = 0
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self._node is None:
            if self.requires_grad:
                _accumulate_leaf(self, grad)
            return
        order = _topo_order(self._node)
        self._node.grads[self._index] = grad
        for node in reversed(order):
            gs = node.grads
            if all(g is None for g in gs):
                continue
            if node.multi:
                gs = [np.zeros(s, dtype=dt) if g is None else g for g, (s, dt) in zip(gs, node.shapes)]
                in_grads = node.backward(gs)
            else:
                in_grads = node.backward(gs[0])
            node.grads = [None] * len(node.shapes)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t._node is None:
                    _accumulate_leaf(t, g)
                else:
                    slot = t._node.grads
                    prev = slot[t._index]
                    slot[t._index] = g if prev is None else prev + g


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    check_finite(g, f"gradient of {t.name or 'leaf'}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def _topo_order(root: _Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if isinstance(t, Tensor) and t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _wrap(out, inputs: Sequence, backward: Callable):
    """Attach ``out`` (array or tuple of arrays) to a graph node when recording."""
    multi = isinstance(out, tuple)
    outs = out if multi else (out,)
    track = _state["grad"] and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tensors = tuple(Tensor(o) for o in outs)
    if track:
        node = _Node(tuple(inputs), backward, [(o.shape, o.dtype) for o in outs], multi)
        for i, t in enumerate(tensors):
            t._node = node
            t._index = i
            t.requires_grad = True
    return tensors if multi else tensors[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 0 and not b.requires_grad:
        b = Tensor(b.data.astype(a.dtype))
    av, bv = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _wrap(av * bv, (a, b), backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of rank 1-3 and ``b`` a matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        ga = g @ bv.T
        gb = np.outer(av, g) if av.ndim == 1 else av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _wrap(av @ bv, (a, b), backward)


def affine(x, W, b) -> Tensor:
    """Row-wise ``x W + b``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    xv, Wv = x.data, W.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wv.T
        gW = xv.reshape(-1, xv.shape[-1]).T @ g2
        return gx, gW, g2.sum(axis=0)

    return _wrap(xv @ Wv + b.data, (x, W, b), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _wrap(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _wrap(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    m = x.data > 0
    return _wrap(x.data * m, (x,), lambda g: (g * m,))


def total(x) -> Tensor:
    """Sum of all entries."""
    x = as_tensor(x)
    shape, dt = x.shape, x.dtype
    return _wrap(np.asarray(x.data.sum(), dtype=dt), (x,), lambda g: (np.full(shape, g, dtype=dt),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _wrap(out, tensors, backward)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    shape, dt = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, key, g)
        return (out,)

    return _wrap(x.data[key], (x,), backward)


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    shape, dt = table.shape, table.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _wrap(table.data[ids], (table,), backward)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _wrap(x.data * keep, (x,), lambda g: (g * keep,))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _wrap(y, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _wrap(y, (x,), backward)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def smoothed_targets(targets: np.ndarray, V: int, smoothing: float, dtype) -> np.ndarray:
    """Target distribution with ``1 - smoothing`` on the label, the rest spread evenly."""
    targets = np.asarray(targets)
    off = smoothing / (V - 1) if V > 1 else 0.0
    q = np.full(targets.shape + (V,), off, dtype=dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    return q


def softmax_xent(logits, targets, smoothing: float = 0.0, weights=None) -> Tensor:
    """Weighted sum of label-smoothed cross-entropies.

    ``logits`` has shape ``[..., V]`` and ``targets`` the leading shape.  With
    ``weights`` (same shape as ``targets``) each position's loss is scaled,
    which is how padded positions are masked out.
    """
    logits = as_tensor(logits)
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    V = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    dt = logits.dtype
    logp = log_softmax_np(logits.data)
    q = smoothed_targets(targets, V, smoothing, dt)
    w = np.ones(targets.shape, dtype=dt) if weights is None else np.asarray(weights, dtype=dt)
    per = -(q * logp).sum(axis=-1)
    loss = np.asarray((per * w).sum(), dtype=dt)

    def backward(g):
        return ((np.exp(logp) - q) * (w * g)[..., None],)

    return _wrap(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# recurrent and attention ops


def _lstm_gates(z: np.ndarray, u: int):
    i = _sigmoid(z[..., :u])
    f = _sigmoid(z[..., u : 2 * u])
    g = np.tanh(z[..., 2 * u : 3 * u])
    o = _sigmoid(z[..., 3 * u :])
    return i, f, g, o


def _check_lstm(x_dim, u, Wx, Wh, b):
    if Wx.shape != (x_dim, 4 * u) or Wh.shape != (u, 4 * u) or b.shape != (4 * u,):
        raise ShapeError(
            f"lstm: input dim {x_dim}, units {u}, Wx{Wx.shape} Wh{Wh.shape} b{b.shape}"
        )


def lstm_cell(x, h, c, Wx, Wh, b, mask=None):
    """One LSTM step (gate order input, forget, candidate, output).

    ``mask`` (shape ``[batch]``) marks rows that advance; rows with mask 0
    carry ``h`` and ``c`` through unchanged.
    """
    x, h, c, Wx, Wh, b = (as_tensor(t) for t in (x, h, c, Wx, Wh, b))
    u = h.shape[-1]
    _check_lstm(x.shape[-1], u, Wx, Wh, b)
    if c.shape != h.shape or x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(f"lstm_cell: x{x.shape} h{h.shape} c{c.shape}")
    xv, hv, cv = x.data, h.data, c.data
    z = (xv @ Wx.data + b.data) + hv @ Wh.data
    i, f, g, o = _lstm_gates(z, u)
    c_new = f * cv + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=xv.dtype)[..., None]
        h_out = m * h_new + (1 - m) * hv
        c_out = m * c_new + (1 - m) * cv
    else:
        m = None
        h_out, c_out = h_new, c_new

    def backward(grads):
        gh, gc = grads
        if m is not None:
            gh_in, gc_in = gh * m, gc * m
        else:
            gh_in, gc_in = gh, gc
        gcn = gc_in + gh_in * o * (1 - tc * tc)
        dz = np.concatenate(
            [gcn * g * i * (1 - i), gcn * cv * f * (1 - f), gcn * i * (1 - g * g), gh_in * tc * o * (1 - o)],
            axis=-1,
        )
        gx = dz @ Wx.data.T
        gh_prev = dz @ Wh.data.T
        gc_prev = gcn * f
        if m is not None:
            gh_prev = gh_prev + gh * (1 - m)
            gc_prev = gc_prev + gc * (1 - m)
        dz2 = dz.reshape(-1, 4 * u)
        gWx = xv.reshape(-1, xv.shape[-1]).T @ dz2
        gWh = hv.reshape(-1, u).T @ dz2
        return gx, gh_prev, gc_prev, gWx, gWh, dz2.sum(axis=0)

    return _wrap((h_out, c_out), (x, h, c, Wx, Wh, b), backward)


def lstm_sequence(xs, Wx, Wh, b, mask=None, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``xs`` of shape ``[B, T, i]`` from a zero state.

    ``mask`` ``[B, T]`` holds 1 for real frames.  Padded steps carry the state,
    so a reversed pass over right-padded input starts at each row's own last
    frame.  Returns hidden states ``[B, T, u]``.
    """
    xs, Wx, Wh, b = (as_tensor(t) for t in (xs, Wx, Wh, b))
    if xs.ndim != 3:
        raise ShapeError(f"lstm_sequence expects [B, T, i], got {xs.shape}")
    B, T, _ = xs.shape
    u = Wh.shape[0]
    _check_lstm(xs.shape[-1], u, Wx, Wh, b)
    dt = xs.dtype
    xv = xs.data
    mv = np.ones((B, T), dtype=dt) if mask is None else np.asarray(mask, dtype=dt)
    Whv = Wh.data
    zx = xv @ Wx.data + b.data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    h = np.zeros((B, u), dtype=dt)
    c = np.zeros((B, u), dtype=dt)
    hs = np.empty((B, T, u), dtype=dt)
    cache = []
    for t in steps:
        z = zx[:, t] + h @ Whv
        i, f, g, o = _lstm_gates(z, u)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mv[:, t, None]
        cache.append((t, h, c, i, f, g, o, tc, m))
        h = m * h_new + (1 - m) * h
        c = m * c_new + (1 - m) * c
        hs[:, t] = h

    def backward(ghs):
        dzs = np.empty((B, T, 4 * u), dtype=dt)
        gWh = np.zeros_like(Whv)
        gh = np.zeros((B, u), dtype=dt)
        gc = np.zeros((B, u), dtype=dt)
        for t, h_prev, c_prev, i, f, g, o, tc, m in reversed(cache):
            gh = gh + ghs[:, t]
            gh_in, gc_in = gh * m, gc * m
            gcn = gc_in + gh_in * o * (1 - tc * tc)
            dz = np.concatenate(
                [gcn * g * i * (1 - i), gcn * c_prev * f * (1 - f), gcn * i * (1 - g * g), gh_in * tc * o * (1 - o)],
                axis=-1,
            )
            dzs[:, t] = dz
            gWh += h_prev.T @ dz
            gh = dz @ Whv.T + gh * (1 - m)
            gc = gcn * f + gc * (1 - m)
        dz2 = dzs.reshape(-1, 4 * u)
        gx = dzs @ Wx.data.T
        gWx = xv.reshape(-1, xv.shape[-1]).T @ dz2
        return gx, gWx, gWh, dz2.sum(axis=0)

    return _wrap(hs, (xs, Wx, Wh, b), backward)


def pair_max_pool(x, lengths) -> Tensor:
    """Element-wise max over consecutive time pairs of ``x`` ``[B, T, D]``.

    A row with odd valid length carries its last valid frame through
    unchanged.  Output has ``ceil(T / 2)`` steps.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"pair_max_pool expects [B, T, D], got {x.shape}")
    B, T, D = x.shape
    xv = x.data
    if T % 2:
        xv = np.concatenate([xv, xv[:, -1:]], axis=1)
    a, bb = xv[:, 0::2], xv[:, 1::2]
    pick_b = bb > a
    lengths = np.asarray(lengths)
    for r in np.nonzero(lengths % 2 == 1)[0]:
        pick_b[r, lengths[r] // 2] = False
    out = np.where(pick_b, bb, a)
    dt = x.dtype

    def backward(g):
        gx = np.zeros((B, 2 * g.shape[1], D), dtype=dt)
        gx[:, 0::2] = np.where(pick_b, 0, g)
        gx[:, 1::2] = np.where(pick_b, g, 0)
        return (gx[:, :T],)

    return _wrap(out, (x,), backward)


def attention(keys, values, query, v, mask=None):
    """Additive attention ``u_i = v . tanh(keys_i + query)``.

    ``keys`` ``[B, T, A]`` are the projected encoder features, ``values``
    ``[B, T, D]`` the features themselves, ``query`` ``[B, A]`` the projected
    decoder state plus bias.  Returns ``(context [B, D], weights [B, T])``;
    masked positions get zero weight.
    """
    keys, values, query, v = (as_tensor(t) for t in (keys, values, query, v))
    if keys.ndim != 3 or query.shape != (keys.shape[0], keys.shape[2]) or v.shape != (keys.shape[2],):
        raise ShapeError(f"attention: keys{keys.shape} query{query.shape} v{v.shape}")
    if values.shape[:2] != keys.shape[:2]:
        raise ShapeError(f"attention: keys{keys.shape} values{values.shape}")
    kv, hv, vv = keys.data, values.data, v.data
    e = np.tanh(kv + query.data[:, None, :])
    u = e @ vv
    if mask is not None:
        mk = np.asarray(mask, dtype=bool)
        u = np.where(mk, u, -np.inf)
    u = u - u.max(axis=1, keepdims=True)
    w = np.exp(u)
    alpha = w / w.sum(axis=1, keepdims=True)
    ctx = np.einsum("bt,btd->bd", alpha, hv)

    def backward(grads):
        gctx, galpha = grads
        ga = galpha + np.einsum("btd,bd->bt", hv, gctx)
        gu = alpha * (ga - (ga * alpha).sum(axis=1, keepdims=True))
        gvals = alpha[:, :, None] * gctx[:, None, :]
        gz = gu[:, :, None] * vv * (1 - e * e)
        gv = np.einsum("bt,bta->a", gu, e)
        return gz, gvals, gz.sum(axis=1), gv

    return _wrap((ctx, alpha), (keys, values, query, v), backward)
