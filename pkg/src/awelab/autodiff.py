"""A small eager reverse-mode autodiff engine over numpy arrays.

Every op computes its forward value immediately and records a closure
mapping the upstream gradient to one gradient per parent. ``backward``
walks the recorded graph once in reverse topological order.

There is no general broadcasting: elementwise binary ops require equal
shapes, and bias addition is the one explicit exception (``add_bias``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_default_dtype = np.float32


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, op=""):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=True)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen = [], set()
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
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# --- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (masks, targets)."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return _make(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    # np.maximum keeps NaN visible instead of mapping it to 0
    return _make(np.maximum(x.data, x.data.dtype.type(0)), (x,), lambda g: (g * pos,), "relu")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (x,), lambda g: (g * _sigmoid(z),), "softplus")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not train or p == 0:
        return x
    if not 0 <= p < 1:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --- linear algebra and reductions ----------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n) @ (n, m). The right operand is always a matrix."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    return mul_scalar(tsum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(x.data[key], (x,), bw, "getitem")


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    return getitem(x, idx)


def pick(x: Tensor, idx) -> Tensor:
    """out[i] = x[i, idx[i]] for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: index {idx.shape} incompatible with {x.shape}")
    return getitem(x, (np.arange(x.shape[0]), idx))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    datas = [t.data for t in tensors]
    ref = list(datas[0].shape)
    ax = axis % len(ref)
    for d in datas[1:]:
        s = list(d.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([d.shape[ax] for d in datas])[:-1]
    return _make(np.concatenate(datas, axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    if any(d.shape != datas[0].shape for d in datas):
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}")
    n = len(datas)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack(datas, axis=axis), tuple(tensors), bw, "stack")


def mean_over_time(x: Tensor, lengths=None) -> Tensor:
    """Masked mean over axis 1 of a (B, T, F) tensor."""
    if x.ndim != 3:
        raise ShapeError(f"mean_over_time: expected (B, T, F), got {x.shape}")
    B, T, _ = x.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    if lengths.shape != (B,) or (lengths < 1).any() or (lengths > T).any():
        raise ShapeError(f"mean_over_time: bad lengths {lengths} for {x.shape}")
    w = (np.arange(T)[None, :] < lengths[:, None]).astype(x.data.dtype)
    w /= lengths[:, None].astype(x.data.dtype)
    out = np.einsum("btf,bt->bf", x.data, w)
    return _make(out, (x,), lambda g: (g[:, None, :] * w[:, :, None],), "mean_over_time")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (N, D) tensors."""
    _check_same("cosine_similarity", a, b)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine_similarity: zero-norm vector")
    cos = (ad * bd).sum(axis=-1, keepdims=True) / (na * nb)

    def bw(g):
        g = g[..., None]
        ga = g * (bd / (na * nb) - cos * ad / (na * na))
        gb = g * (ad / (na * nb) - cos * bd / (nb * nb))
        return ga, gb

    return _make(cos[..., 0], (a, b), bw, "cosine_similarity")


# --- sequence ops ----------------------------------------------------------

def place_in_time(x: Tensor, lengths, offsets, out_len: int) -> Tensor:
    """Copy x[b, :lengths[b]] to out[b, offsets[b]:offsets[b]+lengths[b]]; zeros elsewhere.

    Used to left-pad short sequences and to discard padded positions
    before a convolution.
    """
    B, _, F = x.shape
    lengths, offsets = np.asarray(lengths), np.asarray(offsets)
    if (offsets + lengths > out_len).any():
        raise ShapeError("place_in_time: sequence does not fit into output length")
    out = np.zeros((B, out_len, F), dtype=x.data.dtype)
    for b in range(B):
        out[b, offsets[b]:offsets[b] + lengths[b]] = x.data[b, :lengths[b]]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        for b in range(B):
            gx[b, :lengths[b]] = g[b, offsets[b]:offsets[b] + lengths[b]]
        return (gx,)

    return _make(out, (x,), bw, "place_in_time")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid 1-D convolution, stride 1: (B, T, C) * (K, C, F) -> (B, T-K+1, F)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    B, T, C = x.shape
    K, _, F = w.shape
    if T < K:
        raise ShapeError(f"conv1d: input length {T} shorter than kernel width {K}")
    To = T - K + 1
    # (B, To, C, K) -> (B, To, K, C)
    cols = sliding_window_view(x.data, K, axis=1).transpose(0, 1, 3, 2).reshape(B * To, K * C)
    wmat = w.data.reshape(K * C, F)
    out = (cols @ wmat).reshape(B, To, F)
    if b is not None:
        if b.shape != (F,):
            raise ShapeError(f"conv1d: bias {b.shape} does not match {F} filters")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(B * To, F)
        gw = (cols.T @ g2).reshape(K, C, F)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, To, K, C)
            gx = np.zeros((B, T, C), dtype=g.dtype)
            for k in range(K):
                gx[:, k:k + To] += gcols[:, :, k]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bw, "conv1d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, mask=None,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis but the last.

    ``mask`` (shape ``x.shape[:-1]``) selects the positions that contribute
    to batch statistics; masked-out positions produce zeros. In train mode
    the running statistics are updated in place.
    """
    F = x.shape[-1]
    if gamma.shape != (F,) or beta.shape != (F,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} vs features {F}")
    xd = x.data
    m = np.ones(xd.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != xd.shape[:-1]:
        raise ShapeError(f"batch_norm: mask {m.shape} does not match {xd.shape[:-1]}")
    mf = m[..., None].astype(xd.dtype)
    n = int(m.sum())
    if train:
        if n < 2:
            raise ShapeError("batch_norm: need at least 2 positions in train mode")
        mu = (xd * mf).sum(axis=tuple(range(xd.ndim - 1))) / n
        diff = (xd - mu) * mf
        var = (diff * diff).sum(axis=tuple(range(xd.ndim - 1))) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv * mf
    out = (xhat * gamma.data + beta.data) * mf
    axes = tuple(range(xd.ndim - 1))

    def bw(g):
        g = g * mf
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if train:
            gx = inv * (gxhat - gxhat.sum(axis=axes) / n - xhat * (gxhat * xhat).sum(axis=axes) / n) * mf
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def gru_cell(xp: Tensor, h: Tensor, u: Tensor, bu: Tensor, mask=None) -> Tensor:
    """One GRU step given the precomputed input projection ``xp`` (B, 3H).

    Gate layout is (reset, update, candidate):
        r = sigmoid(xp_r + h U_r + b_r)
        z = sigmoid(xp_z + h U_z + b_z)
        n = tanh(xp_n + r * (h U_n + b_n))
        h' = (1 - z) * n + z * h
    Rows where ``mask`` is 0 keep their previous state.
    """
    B, H = h.shape
    if xp.shape != (B, 3 * H) or u.shape != (H, 3 * H) or bu.shape != (3 * H,):
        raise ShapeError(f"gru_cell: xp {xp.shape}, h {h.shape}, U {u.shape}, b {bu.shape}")
    hd, ud = h.data, u.data
    gh = hd @ ud + bu.data
    r = _sigmoid(xp.data[:, :H] + gh[:, :H])
    z = _sigmoid(xp.data[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(xp.data[:, 2 * H:] + r * ghn)
    hnew = n + z * (hd - n)
    if mask is None:
        m = None
        out = hnew
    else:
        m = np.asarray(mask, dtype=hd.dtype).reshape(B, 1)
        out = hd + m * (hnew - hd)

    def bw(g):
        gnew = g if m is None else g * m
        gh_direct = gnew * z if m is None else g * (1 - m) + gnew * z
        gz = gnew * (hd - n)
        dn = gnew * (1 - z) * (1 - n * n)
        dr = dn * ghn * r * (1 - r)
        dz = gz * z * (1 - z)
        gxp = np.concatenate([dr, dz, dn], axis=1)
        ggh = np.concatenate([dr, dz, dn * r], axis=1)
        return gxp, gh_direct + ggh @ ud.T, hd.T @ ggh, ggh.sum(axis=0)

    return _make(out, (xp, h, u, bu), bw, "gru_cell")


# --- finite-difference checking -------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare backprop gradients of scalar ``fn()`` with central differences.

    ``fn`` must rebuild the graph on each call and be deterministic.
    Returns the largest relative error over all parameter entries.
    """
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(fn().data)
            flat[i] = old - eps
            fm = float(fn().data)
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(analytic, numeric))
    for p in params:
        p.grad = None
    return worst


def gru_layer(xp: Tensor, u: Tensor, bu: Tensor, lengths=None, reverse: bool = False,
              h0: Tensor | None = None) -> Tensor:
    """Run ``gru_cell`` over a whole (B, T, 3H) input projection.

    Returns all hidden states, shape (B, T, H). Steps at or beyond a row's
    length hold the previous state, so a right-padded batch gives the same
    per-row states as running each row alone. With ``reverse`` the
    recurrence runs from the last valid step down to step 0.
    """
    B, T, H3 = xp.shape
    H = H3 // 3
    if H3 != 3 * H or u.shape != (H, H3) or bu.shape != (H3,):
        raise ShapeError(f"gru_layer: xp {xp.shape}, U {u.shape}, b {bu.shape}")
    if h0 is not None and h0.shape != (B, H):
        raise ShapeError(f"gru_layer: h0 {h0.shape} does not match ({B}, {H})")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    dtype = xp.data.dtype
    ud, bud, xd = u.data, bu.data, xp.data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    h = np.zeros((B, H), dtype=dtype) if h0 is None else h0.data
    out = np.empty((B, T, H), dtype=dtype)
    cache = []
    for t in steps:
        m = (t < lengths).astype(dtype)[:, None]
        gh = h @ ud + bud
        r = _sigmoid(xd[:, t, :H] + gh[:, :H])
        z = _sigmoid(xd[:, t, H:2 * H] + gh[:, H:2 * H])
        ghn = gh[:, 2 * H:]
        n = np.tanh(xd[:, t, 2 * H:] + r * ghn)
        hnew = h + m * (n + z * (h - n) - h)
        cache.append((t, m, h, r, z, n, ghn))
        out[:, t] = hnew
        h = hnew

    def bw(g):
        gxp = np.zeros_like(xd)
        gu = np.zeros_like(ud)
        gbu = np.zeros_like(bud)
        carry = np.zeros((B, H), dtype=g.dtype)
        for t, m, hp, r, z, n, ghn in reversed(cache):
            gt = g[:, t] + carry
            gnew = gt * m
            dn = gnew * (1 - z) * (1 - n * n)
            dr = dn * ghn * r * (1 - r)
            dz = gnew * (hp - n) * z * (1 - z)
            gxp[:, t] = np.concatenate([dr, dz, dn], axis=1)
            ggh = np.concatenate([dr, dz, dn * r], axis=1)
            gu += hp.T @ ggh
            gbu += ggh.sum(axis=0)
            carry = gt * (1 - m) + gnew * z + ggh @ ud.T
        return gxp, gu, gbu, carry

    parents = (xp, u, bu) if h0 is None else (xp, u, bu, h0)
    return _make(out, parents, (lambda g: bw(g)[:3]) if h0 is None else bw, "gru_layer")
