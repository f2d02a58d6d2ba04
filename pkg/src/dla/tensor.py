"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` whose ``_backward`` closure maps the
upstream gradient to one gradient per parent. :func:`backward` walks the
recorded graph in reverse topological order and accumulates into the
``grad`` of every leaf that requires it.

Two execution paths exist for the contraction ops (``matmul`` and
``conv2d``). The default path hands the work to BLAS. Inside
:func:`reference_mode` both ops accumulate in a fixed row-major order so that
their results agree bit-for-bit with a naive scalar loop.
"""

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

_state = {"grad": True, "reference": False}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def reference_mode():
    """Use fixed-order accumulation for matmul and conv2d inside the block."""
    prev = _state["reference"]
    _state["reference"] = True
    try:
        yield
    finally:
        _state["reference"] = prev


def grad_enabled():
    return _state["grad"]


def _check_finite(arr, what="op output"):
    # Any NaN/inf makes the sum non-finite; the full scan only runs to rule
    # out an overflowing sum of finite values.
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """A float64 array that can take part in a differentiation tape.

    Leaves are created directly; interior nodes come from the op functions in
    this module (or the operator overloads below).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward):
        data = np.asarray(data, dtype=DTYPE)
        _check_finite(data)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss, leaves=None):
    """Propagate d(loss)/d(.) to every leaf of the graph below ``loss``.

    Gradients accumulate by addition into ``leaf.grad``. Leaves listed in
    ``leaves`` that the graph never touches receive a zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() needs a scalar loss tensor")
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ------------------------------------------------------------ elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._from_op(out, (a, b), bw)


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    if (ad <= 0).any():
        raise NumericError("log of non-positive value")
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    out = np.maximum(a.data, 0.0)
    return Tensor._from_op(out, (a,), lambda g: (g * (out > 0),))


def identity(a):
    return a


# -------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return Tensor._from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ------------------------------------------------------------- structural


def reshape(a, shape):
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    shape = a.shape

    basic = all(
        isinstance(i, (slice, int, type(Ellipsis))) or i is None
        for i in (idx if isinstance(idx, tuple) else (idx,))
    )

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(a.data[idx], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# ------------------------------------------------------------ contractions


def _fixed_order_matmul(a, b):
    out = np.zeros(a.shape[:-1] + b.shape[-1:])
    for k in range(a.shape[-1]):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    out = _fixed_order_matmul(ad, bd) if _state["reference"] else ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(out, (a, b), bw)


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _columns(x, k, stride, padding, ho, wo):
    """Patch matrix of shape (C*k*k, B*ho*wo) with rows ordered (c, i, j)."""
    B, C, H, W = x.shape
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((C, k, k, B, ho, wo))
    for i in range(k):
        # output rows r with 0 <= r*stride + i - padding < H
        r0 = max(0, -((i - padding) // stride))
        r1 = min(ho, (H - 1 - i + padding) // stride + 1)
        for j in range(k):
            c0 = max(0, -((j - padding) // stride))
            c1 = min(wo, (W - 1 - j + padding) // stride + 1)
            view = cols[:, i, j]
            if r1 <= r0 or c1 <= c0:
                view[...] = 0.0
                continue
            view[:, :, :r0] = 0.0
            view[:, :, r1:] = 0.0
            view[:, :, :, :c0] = 0.0
            view[:, :, :, c1:] = 0.0
            src_r = r0 * stride + i - padding
            src_c = c0 * stride + j - padding
            cols[:, i, j, :, r0:r1, c0:c1] = xt[
                :,
                :,
                src_r : src_r + stride * (r1 - r0 - 1) + 1 : stride,
                src_c : src_c + stride * (c1 - c0 - 1) + 1 : stride,
            ]
    return cols.reshape(C * k * k, B * ho * wo)


def conv2d(x, w, stride=1, padding=None):
    """Cross-correlate ``x`` (B, Cin, H, W) with ``w`` (Cout, Cin, k, k).

    ``padding=None`` means "same" padding, ``k // 2``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: bad shapes x={x.shape} w={w.shape}")
    cout, cin, k, _ = w.shape
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    if padding is None:
        padding = k // 2
    B, _, H, W = x.shape
    ho = conv_output_size(H, k, stride, padding)
    wo = conv_output_size(W, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: non-positive output extent ({ho}, {wo})")
    xd, wd = x.data, w.data
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    if k == 1 and stride == 1 and padding == 0 and not _state["reference"]:
        return _pointwise(x, w)

    if _state["reference"]:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out = np.zeros((B, cout, ho, wo))
        for ci in range(cin):
            for i in range(k):
                for j in range(k):
                    patch = xp[:, ci, i : i + hspan : stride, j : j + wspan : stride]
                    out += patch[:, None] * wd[None, :, ci, i, j, None, None]
        cols = None
    else:
        cols = _columns(xd, k, stride, padding, ho, wo)
        out = (wd.reshape(cout, -1) @ cols).reshape(cout, B, ho, wo).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)

    def bw(g):
        nonlocal cols
        if cols is None:
            cols = _columns(xd, k, stride, padding, ho, wo)
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(wd.shape)
        if stride == 1 and 2 * padding == k - 1:
            # Same-size stride-1 case: the input gradient is a correlation of
            # g with the spatially flipped, channel-swapped kernel.
            wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = wflip @ _columns(g, k, 1, k - 1 - padding, H, W)
            return np.ascontiguousarray(gx.reshape(cin, B, H, W).transpose(1, 0, 2, 3)), gw
        gcols = (wd.reshape(cout, -1).T @ gm).reshape(cin, k, k, B, ho, wo)
        gxp = np.zeros((cin, B, H + 2 * padding, W + 2 * padding))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += gcols[:, i, j]
        gx = gxp[:, :, padding : padding + H, padding : padding + W].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw

    return Tensor._from_op(out, (x, w), bw)


def _pointwise(x, w):
    # 1x1 stride-1 convolution as a channel matmul per sample.
    B, C, H, W = x.shape
    cout = w.shape[0]
    xr = x.data.reshape(B, C, H * W)
    wm = w.data.reshape(cout, C)
    out = (wm @ xr).reshape(B, cout, H, W)

    def bw(g):
        gr = g.reshape(B, cout, H * W)
        gw = (gr @ xr.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = (wm.T @ gr).reshape(B, C, H, W)
        return gx, gw

    return Tensor._from_op(out, (x, w), bw)


def global_average_pool(x):
    """Spatial mean per channel: (B, C, H, W) -> (B, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_average_pool expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    return Tensor._from_op(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)),),
    )


# ----------------------------------------------------------- normalizers


def softmax(v, axis=-1):
    v = as_tensor(v)
    if np.isnan(v.data).any():
        raise NumericError("softmax: NaN input")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (v,), bw)


def _channel_sum(a):
    # Sum over every axis except 1.
    if a.ndim == 2:
        return a.sum(axis=0)
    return a.reshape(a.shape[0], a.shape[1], -1).sum(axis=2).sum(axis=0)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over every axis except 1.

    ``running_mean``/``running_var`` are plain arrays updated in place when
    ``training`` is true (unbiased variance, exponential moving average).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    n = xd.size // x.shape[1]
    if training:
        mu = _channel_sum(xd) / n
        xc = xd - mu.reshape(bshape)
        var = _channel_sum(xc * xc) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv
    out = xd * scale.reshape(bshape)
    out += (beta.data - mu * scale).reshape(bshape)

    def bw(g):
        xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
        sum_g = _channel_sum(g)
        sum_gx = _channel_sum(g * xhat)
        if training:
            gx = g * scale.reshape(bshape)
            gx -= xhat * (scale * sum_gx / n).reshape(bshape)
            gx -= (scale * sum_g / n).reshape(bshape)
        else:
            gx = g * scale.reshape(bshape)
        return gx, sum_gx, sum_g

    return Tensor._from_op(out, (x, gamma, beta), bw)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = labels.shape[0]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return Tensor._from_op(np.array(loss), (logits,), bw)
